use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use disc_core::autodiff::OpKind;
use disc_core::datagen::{generate_dataset, Split};
use disc_core::disc::checks::gradient_suite;
use disc_core::disc::{infer_num_classes, Mode, Model, TrainConfig, Trainer};
use disc_core::eval::{self, STANDARD_PRUNE_LEVELS};
use disc_core::graphdata::{save_dataset, GraphInstance, SplitEntry, SplitManifest, FEATURE_DIM};
use disc_core::rng::digest_hex;
use log::info;
use serde_json::json;

use crate::args::{
    Command, EvalArgs, ExportArgs, GenDataArgs, GradcheckArgs, Hyper, PruneArgs, TrainArgs,
    TransferArgs,
};
use crate::checkpoint::Checkpoint;
use crate::config::{fit_palettes, LoadedConfig, RunConfig};
use crate::run::RunDir;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

macro_rules! fail {
    ($($t:tt)*) => {
        return Err(CliError::Runtime(anyhow!($($t)*)))
    };
}

macro_rules! check {
    ($cond:expr, $($t:tt)*) => {
        if !$cond {
            fail!($($t)*);
        }
    };
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ExportMasks(a) => export(a, true),
        Command::ExportEmbeddings(a) => export(a, false),
        Command::Prune(a) => prune(a),
        Command::Transfer(a) => transfer(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn require_out(out: &Option<PathBuf>, cmd: &str) -> Result<PathBuf> {
    out.clone()
        .ok_or_else(|| usage(format!("{cmd}: --out is required")))
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(anyhow::Error::from)?;
    s.push('\n');
    std::io::stdout().write_all(s.as_bytes())?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let out = require_out(&a.shared.out, "gen-data")?;
    let loaded = LoadedConfig::load(a.shared.config.as_deref())?;
    let mut spec = loaded.file.data.clone();
    if let Some(k) = a.classes {
        spec.num_classes = k;
    }
    fit_palettes(&mut spec, &loaded);
    if let Some(v) = a.bias {
        spec.bias_degree = v;
    }
    if let Some(v) = a.val_bias {
        spec.val_bias_degree = v;
    }
    if let Some(v) = a.train {
        spec.sizes.train = v;
    }
    if let Some(v) = a.val {
        spec.sizes.val = v;
    }
    if let Some(v) = a.test {
        spec.sizes.test_biased = v;
        spec.sizes.test_unbiased = v;
        spec.sizes.test_unseen = v;
    }
    if let Some(v) = a.nodes {
        spec.nodes_per_graph = v;
    }
    if let Some(v) = a.knn {
        spec.knn_k = v;
    }
    if let Some(v) = a.shared.seed {
        spec.seed = v;
    }
    spec.validate().map_err(usage)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = generate_dataset(&spec, &out)?;
    info!(
        "wrote {} splits to {}",
        manifest.splits.len(),
        out.display()
    );
    let sizes: BTreeMap<&str, usize> = manifest
        .splits
        .iter()
        .map(|(s, e)| (s.name(), e.size))
        .collect();
    print_json(&json!({ "out": out, "spec_hash": manifest.spec_hash, "splits": sizes }))
}

/// File values, then flags. An unset `t_gen` follows half the epoch budget.
fn resolve_train(
    loaded: &LoadedConfig,
    mode: Option<Mode>,
    h: &Hyper,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut c = loaded.file.train;
    if let Some(v) = mode {
        c.mode = v;
    }
    if let Some(v) = h.q {
        c.q = v;
    }
    if let Some(v) = h.lambda_g {
        c.lambda_g = v;
    }
    if let Some(v) = h.epochs {
        c.epochs = v;
    }
    if let Some(v) = h.lr {
        c.lr = v;
    }
    if let Some(v) = h.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = h.encoder {
        c.encoder.kind = v;
    }
    if let Some(v) = h.layers {
        c.encoder.layers = v;
    }
    if let Some(v) = h.hidden {
        c.encoder.hidden = v;
    }
    if let Some(v) = h.masker_hidden {
        c.masker_hidden = v;
    }
    if let Some(v) = seed {
        c.seed = v;
    }
    c.t_gen = match h.t_gen {
        Some(t) => t,
        None if loaded.has("train", "t_gen") => c.t_gen,
        None => c.epochs / 2,
    };
    c.validate().map_err(usage)?;
    Ok(c)
}

struct Data {
    dir: PathBuf,
    manifest: SplitManifest,
}

impl Data {
    fn open(dir: &Path) -> Result<Self> {
        let manifest = SplitManifest::load(dir)
            .with_context(|| format!("reading dataset manifest in {}", dir.display()))?;
        manifest.verify(dir)?;
        Ok(Data {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    fn has(&self, split: Split) -> bool {
        self.manifest.splits.contains_key(&split)
    }

    fn load(&self, split: Split) -> Result<Vec<GraphInstance>> {
        Ok(self.manifest.load_split(&self.dir, split)?)
    }

    /// Graphs plus a digest of the file bytes they came from.
    fn load_with_digest(&self, split: Split) -> Result<(Vec<GraphInstance>, String)> {
        if !self.has(split) {
            return Ok((Vec::new(), digest_hex(b"")));
        }
        let path = self.manifest.split_path(&self.dir, split)?;
        let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok((self.load(split)?, digest_hex(&bytes)))
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let loaded = LoadedConfig::load(a.shared.config.as_deref())?;
    let cfg = resolve_train(&loaded, a.mode, &a.hyper, a.shared.seed)?;
    let data = Data::open(&a.data)?;
    let (train_set, dt) = data.load_with_digest(Split::Train)?;
    let (val_set, dv) = data.load_with_digest(Split::Val)?;
    let k = data.manifest.spec.num_classes;
    let seen = infer_num_classes(&train_set).max(infer_num_classes(&val_set));
    if seen > k {
        return Err(anyhow!(
            "dataset labels reach {} but the manifest declares {k} classes",
            seen - 1
        )
        .into());
    }
    let digest = digest_hex(format!("{dt}{dv}").as_bytes());
    let rc = RunConfig::new(
        a.data.display().to_string(),
        data.manifest.spec_hash.clone(),
        digest,
        k,
        cfg,
    );

    let (run, mut trainer) = match &a.resume {
        None => {
            let out = a
                .shared
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs"));
            let run = RunDir::new(out.join(rc.dir_name()));
            run.create(&rc)?;
            let trainer = Trainer::new(cfg, k)?;
            Checkpoint::capture(&trainer.model, 0, &rc.config_hash, cfg.seed)
                .save(&run.checkpoint())?;
            (run, trainer)
        }
        Some(dir) => {
            let run = RunDir::new(dir);
            let prev = run.read_config()?;
            if prev.config_hash != rc.config_hash {
                return Err(anyhow!(
                    "config hash mismatch: {} was trained with {}, these flags and data give {}",
                    dir.display(),
                    prev.config_hash,
                    rc.config_hash
                )
                .into());
            }
            let ck = Checkpoint::load(&run.checkpoint())?;
            check!(
                ck.config_hash == rc.config_hash,
                "checkpoint config hash {} does not match {}",
                ck.config_hash,
                rc.config_hash
            );
            check!(
                ck.rng.seed == cfg.seed && prev.train.seed == cfg.seed,
                "seed mismatch: run uses seed {}, flags give {}",
                ck.rng.seed,
                cfg.seed
            );
            check!(
                ck.epoch <= cfg.epochs,
                "checkpoint is at epoch {}, beyond --epochs {}",
                ck.epoch,
                cfg.epochs
            );
            let model = ck.model()?;
            check!(
                model.arch == cfg.architecture(k),
                "checkpoint architecture differs from the configured one"
            );
            run.truncate_metrics(ck.epoch)?;
            run.write_config(&rc)?;
            info!("resuming {} at epoch {}", dir.display(), ck.epoch);
            (run, Trainer::resume(cfg, model, ck.epoch))
        }
    };

    while !trainer.finished() {
        let t0 = Instant::now();
        let m = trainer.run_epoch(&train_set, &val_set)?;
        let wall = a.wall_clock.then(|| t0.elapsed().as_secs_f64());
        run.append_metrics(&m, wall)?;
        Checkpoint::capture(
            &trainer.model,
            trainer.next_epoch,
            &rc.config_hash,
            cfg.seed,
        )
        .save(&run.checkpoint())?;
        info!(
            "epoch {}/{}: L_D {:.4} L_G {:.4} train {:.3} val {}",
            m.epoch + 1,
            cfg.epochs,
            m.l_d,
            m.l_g,
            m.train_acc,
            m.val_acc.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    print_json(&json!({
        "run_dir": run.path,
        "config_hash": rc.config_hash,
        "epochs": trainer.next_epoch,
    }))
}

fn open_model(path: &Path) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.model()?;
    Ok((ck, model))
}

/// Labels must fit the model's classifier and features its input layer.
fn check_schema(model: &Model, split: Split, graphs: &[GraphInstance]) -> Result<()> {
    let k = model.arch.num_classes;
    for g in graphs {
        if g.x.len() != g.num_nodes * FEATURE_DIM {
            fail!(
                "split {}: graph {} has {} feature values for {} nodes, the model expects {FEATURE_DIM} per node",
                split.name(),
                g.id,
                g.x.len(),
                g.num_nodes
            );
        }
        if g.y >= k || g.bias_label >= k {
            fail!(
                "split {}: graph {} has label {} and bias label {}, the checkpoint classifies {k} classes",
                split.name(),
                g.id,
                g.y,
                g.bias_label
            );
        }
    }
    Ok(())
}

fn parse_split(name: &str) -> Result<Split> {
    Split::from_name(name).ok_or_else(|| {
        let names: Vec<_> = Split::ALL.iter().map(|s| s.name()).collect();
        usage(format!(
            "unknown split `{name}` (expected one of {})",
            names.join(", ")
        ))
    })
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let wanted: Vec<Split> = a
        .split
        .iter()
        .map(|s| parse_split(s))
        .collect::<Result<_>>()?;
    let (ck, model) = open_model(&a.checkpoint)?;
    let data = Data::open(&a.data)?;
    let mut splits = BTreeMap::new();
    for &s in data.manifest.splits.keys() {
        if wanted.is_empty() || wanted.contains(&s) {
            let g = data.load(s)?;
            check_schema(&model, s, &g)?;
            splits.insert(s, g);
        }
    }
    for s in &wanted {
        check!(
            splits.contains_key(s),
            "dataset has no `{}` split",
            s.name()
        );
    }
    let seed = a.shared.seed.unwrap_or(ck.rng.seed);
    let report = eval::evaluate(&model, &splits, &ck.config_hash, ck.epoch, seed)?;
    let v = serde_json::to_value(&report).map_err(anyhow::Error::from)?;
    if let Some(out) = &a.shared.out {
        let mut s = serde_json::to_string_pretty(&v).map_err(anyhow::Error::from)?;
        s.push('\n');
        std::fs::write(out, s).with_context(|| format!("writing {}", out.display()))?;
    }
    print_json(&v)
}

fn export(a: ExportArgs, masks: bool) -> Result<()> {
    let cmd = if masks {
        "export-masks"
    } else {
        "export-embeddings"
    };
    let out = require_out(&a.shared.out, cmd)?;
    let split = parse_split(&a.split)?;
    let (_, model) = open_model(&a.checkpoint)?;
    if masks && model.arch.mode != Mode::Disc {
        return Err(
            anyhow!("export-masks needs a two-branch checkpoint; this one is vanilla").into(),
        );
    }
    let data = Data::open(&a.data)?;
    let graphs = data.load(split)?;
    check_schema(&model, split, &graphs)?;
    let file =
        std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    let n = if masks {
        eval::export_masks(&model, &graphs, &mut w)?
    } else {
        eval::export_embeddings(&model, &graphs, &mut w)?
    };
    w.flush()?;
    print_json(&json!({ "split": split.name(), "records": n, "path": out }))
}

fn prune(a: PruneArgs) -> Result<()> {
    let out = require_out(&a.shared.out, "prune")?;
    if !(0.0..=1.0).contains(&a.fraction) {
        return Err(usage(format!(
            "--fraction must lie in [0, 1], got {}",
            a.fraction
        )));
    }
    let (_, model) = open_model(&a.checkpoint)?;
    if model.arch.mode != Mode::Disc {
        return Err(anyhow!("prune needs a two-branch checkpoint; this one is vanilla").into());
    }
    let data = Data::open(&a.data)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut entries = BTreeMap::new();
    let mut report = BTreeMap::new();
    for &s in data.manifest.splits.keys() {
        let graphs = data.load(s)?;
        check_schema(&model, s, &graphs)?;
        let pruned = eval::prune_dataset(&model, &graphs, a.fraction)?;
        let file = s.file_name();
        save_dataset(out.join(&file), &pruned)?;
        let before: usize = graphs.iter().map(GraphInstance::num_edges).sum();
        let after: usize = pruned.iter().map(GraphInstance::num_edges).sum();
        report.insert(
            s.name(),
            json!({ "graphs": pruned.len(), "edges_before": before, "edges_after": after }),
        );
        entries.insert(
            s,
            SplitEntry {
                path: file,
                size: pruned.len(),
            },
        );
    }
    let manifest = SplitManifest {
        splits: entries,
        ..data.manifest.clone()
    };
    manifest.save(&out)?;
    print_json(&json!({ "fraction": a.fraction, "out": out, "splits": report }))
}

fn transfer(a: TransferArgs) -> Result<()> {
    let loaded = LoadedConfig::load(a.shared.config.as_deref())?;
    let cfg = resolve_train(&loaded, Some(Mode::Vanilla), &a.hyper, a.shared.seed)?;
    let fractions = a
        .fractions
        .clone()
        .unwrap_or_else(|| STANDARD_PRUNE_LEVELS.to_vec());
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(usage(format!("--fractions: {f} is outside [0, 1]")));
    }
    let (_, masker) = open_model(&a.checkpoint)?;
    if masker.arch.mode != Mode::Disc {
        return Err(anyhow!("transfer needs a two-branch checkpoint; this one is vanilla").into());
    }
    let data = Data::open(&a.data)?;
    let load = |s: Split| -> Result<Vec<GraphInstance>> {
        let g = if data.has(s) {
            data.load(s)?
        } else {
            Vec::new()
        };
        check_schema(&masker, s, &g)?;
        Ok(g)
    };
    let (tr, va, te) = (
        load(Split::Train)?,
        load(Split::Val)?,
        load(Split::TestUnbiased)?,
    );
    let rows = eval::transfer_experiment(&masker, &tr, &va, &te, &fractions, cfg)?;
    if let Some(out) = &a.shared.out {
        let mut csv = String::from("level,fraction,unbiased_acc\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{}\n",
                r.level,
                r.fraction.map(|f| f.to_string()).unwrap_or_default(),
                r.unbiased_acc
            ));
        }
        std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    }
    print_json(&json!({ "rows": rows }))
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let fault = match &a.inject_fault {
        None => None,
        Some(name) => Some(
            OpKind::from_name(name)
                .ok_or_else(|| usage(format!("--inject-fault: unknown op `{name}`")))?,
        ),
    };
    let results = gradient_suite(a.shared.seed.unwrap_or(0), fault)?;
    let mut stdout = std::io::stdout().lock();
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        writeln!(
            stdout,
            "{:<28} worst {:.3e}  threshold {:.0e}  {verdict}",
            r.name, r.worst, r.threshold
        )?;
    }
    writeln!(
        stdout,
        "{} of {} checks passed",
        results.len() - failed,
        results.len()
    )?;
    if failed > 0 {
        return Err(anyhow!("{failed} gradient checks failed").into());
    }
    Ok(())
}
