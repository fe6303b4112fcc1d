//! Class-distinctive point templates. Each template is a set of strokes in
//! `[-1, 1]^2`, sampled at equal arc-length spacing.

type Point = [f64; 2];

pub const NUM_TEMPLATES: usize = 10;

pub const TEMPLATE_NAMES: [&str; NUM_TEMPLATES] = [
    "line", "ring", "cross", "tee", "ell", "triangle", "square", "saltire", "vee", "zigzag",
];

fn strokes(class: usize) -> Vec<Vec<Point>> {
    match class {
        0 => vec![vec![[-1.0, 0.0], [1.0, 0.0]]],
        1 => {
            let steps = 64;
            vec![(0..=steps)
                .map(|k| {
                    let a = std::f64::consts::TAU * k as f64 / steps as f64;
                    [a.cos(), a.sin()]
                })
                .collect()]
        }
        2 => vec![vec![[-1.0, 0.0], [1.0, 0.0]], vec![[0.0, -1.0], [0.0, 1.0]]],
        3 => vec![vec![[-1.0, 1.0], [1.0, 1.0]], vec![[0.0, 1.0], [0.0, -1.0]]],
        4 => vec![vec![[-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]]],
        5 => vec![vec![[-1.0, -1.0], [1.0, -1.0], [0.0, 1.0], [-1.0, -1.0]]],
        6 => vec![vec![
            [-1.0, -1.0],
            [1.0, -1.0],
            [1.0, 1.0],
            [-1.0, 1.0],
            [-1.0, -1.0],
        ]],
        7 => vec![
            vec![[-1.0, -1.0], [1.0, 1.0]],
            vec![[-1.0, 1.0], [1.0, -1.0]],
        ],
        8 => vec![vec![[-1.0, 1.0], [0.0, -1.0], [1.0, 1.0]]],
        9 => vec![vec![
            [-1.0, -1.0],
            [-1.0 / 3.0, 1.0],
            [1.0 / 3.0, -1.0],
            [1.0, 1.0],
        ]],
        _ => panic!("no template for class {class}"),
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `points` samples of template `class`, spaced evenly along its strokes.
pub fn template(class: usize, points: usize) -> Vec<Point> {
    let segments: Vec<(Point, Point)> = strokes(class)
        .into_iter()
        .flat_map(|s| s.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>())
        .collect();
    let total: f64 = segments.iter().map(|&(a, b)| dist(a, b)).sum();
    (0..points)
        .map(|k| {
            let mut t = (k as f64 + 0.5) * total / points as f64;
            for &(a, b) in &segments {
                let len = dist(a, b);
                if t <= len {
                    let f = t / len;
                    return [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])];
                }
                t -= len;
            }
            segments.last().unwrap().1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn distance_signature(pts: &[Point]) -> Vec<f64> {
        let mut d = Vec::new();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                d.push(dist(pts[i], pts[j]));
            }
        }
        d.sort_by(f64::total_cmp);
        d
    }

    #[test]
    fn templates_are_pairwise_non_congruent() {
        for m in [8, 12, 20] {
            let sigs: Vec<Vec<f64>> = (0..NUM_TEMPLATES)
                .map(|c| distance_signature(&template(c, m)))
                .collect();
            for a in 0..NUM_TEMPLATES {
                for b in a + 1..NUM_TEMPLATES {
                    let diff = sigs[a]
                        .iter()
                        .zip(&sigs[b])
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f64::max);
                    assert!(
                        diff > 1e-3,
                        "{} ~ {} at m={m}",
                        TEMPLATE_NAMES[a],
                        TEMPLATE_NAMES[b]
                    );
                }
            }
        }
    }

    #[test]
    fn templates_stay_in_unit_box() {
        for c in 0..NUM_TEMPLATES {
            let pts = template(c, 12);
            assert_eq!(pts.len(), 12);
            assert!(pts
                .iter()
                .all(|p| p[0].abs() <= 1.0 + 1e-12 && p[1].abs() <= 1.0 + 1e-12));
        }
    }
}
