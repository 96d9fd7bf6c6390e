//! Parametric primitive families, mirror-symmetric about the xz-plane.
//!
//! Axes: x is the object's length (front at +x), y is lateral, z is up.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    ChairLike,
    CarLike,
    PlaneLike,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::ChairLike, Category::CarLike, Category::PlaneLike];

    pub fn name(self) -> &'static str {
        match self {
            Category::ChairLike => "chair-like",
            Category::CarLike => "car-like",
            Category::PlaneLike => "plane-like",
        }
    }

    pub fn part_names(self) -> [&'static str; 3] {
        match self {
            Category::ChairLike => ["seat", "back", "legs"],
            Category::CarLike => ["body", "cabin", "wheels"],
            Category::PlaneLike => ["fuselage", "wings", "tail"],
        }
    }
}

impl std::str::FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown category {s}"))
    }
}

#[derive(Clone, Copy, Debug)]
enum Solid {
    Box { center: [f64; 3], half: [f64; 3] },
    /// Closed cylinder along axis `axis` (0 = x, 1 = y, 2 = z).
    Cylinder { center: [f64; 3], axis: usize, radius: f64, half_len: f64 },
}

impl Solid {
    fn area(&self) -> f64 {
        match *self {
            Solid::Box { half: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Solid::Cylinder { radius, half_len, .. } => {
                2.0 * std::f64::consts::PI * radius * (2.0 * half_len) + 2.0 * std::f64::consts::PI * radius * radius
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        match *self {
            Solid::Box { center, half } => {
                let faces = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut axis = 2;
                for (a, f) in faces.iter().enumerate() {
                    if pick < *f {
                        axis = a;
                        break;
                    }
                    pick -= f;
                }
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        if rng.gen_bool(0.5) {
                            half[a]
                        } else {
                            -half[a]
                        }
                    } else {
                        rng.gen_range(-half[a]..=half[a])
                    };
                }
                [center[0] + p[0], center[1] + p[1], center[2] + p[2]]
            }
            Solid::Cylinder {
                center,
                axis,
                radius,
                half_len,
            } => {
                let side = 2.0 * half_len;
                let cap = radius;
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let (t, r) = if rng.gen_range(0.0..side + cap) < side {
                    (rng.gen_range(-half_len..=half_len), radius)
                } else {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    (sign * half_len, radius * rng.gen::<f64>().sqrt())
                };
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                let mut p = center;
                p[axis] += t;
                p[u] += r * theta.cos();
                p[v] += r * theta.sin();
                p
            }
        }
    }
}

/// A solid with its part id.
type Part = (Solid, u32);

fn mirrored_box(center: [f64; 3], half: [f64; 3]) -> [Solid; 2] {
    [
        Solid::Box { center, half },
        Solid::Box {
            center: [center[0], -center[1], center[2]],
            half,
        },
    ]
}

fn chair<R: Rng + ?Sized>(rng: &mut R) -> Vec<Part> {
    let width = rng.gen_range(0.5..0.8);
    let depth = rng.gen_range(0.5..0.75);
    let seat_t: f64 = rng.gen_range(0.04..0.08);
    let leg_h: f64 = rng.gen_range(0.3..0.45);
    let leg_t = rng.gen_range(0.04..0.07);
    let back_h = rng.gen_range(0.3..(0.85 - leg_h - seat_t).max(0.31));
    let back_t = rng.gen_range(0.04..0.07);
    let bottom = -0.5 * (leg_h + seat_t + back_h);
    let seat_z = bottom + leg_h + 0.5 * seat_t;
    let mut parts = vec![(
        Solid::Box {
            center: [0.0, 0.0, seat_z],
            half: [0.5 * depth, 0.5 * width, 0.5 * seat_t],
        },
        0,
    )];
    parts.push((
        Solid::Box {
            center: [-0.5 * depth + 0.5 * back_t, 0.0, seat_z + 0.5 * seat_t + 0.5 * back_h],
            half: [0.5 * back_t, 0.5 * width, 0.5 * back_h],
        },
        1,
    ));
    for sx in [-1.0, 1.0] {
        let c = [
            sx * (0.5 * depth - 0.5 * leg_t),
            0.5 * width - 0.5 * leg_t,
            bottom + 0.5 * leg_h,
        ];
        for s in mirrored_box(c, [0.5 * leg_t, 0.5 * leg_t, 0.5 * leg_h]) {
            parts.push((s, 2));
        }
    }
    parts
}

fn car<R: Rng + ?Sized>(rng: &mut R) -> Vec<Part> {
    let length = rng.gen_range(0.75..0.95);
    let width = rng.gen_range(0.32..0.48);
    let body_h = rng.gen_range(0.12..0.2);
    let cabin_l = length * rng.gen_range(0.4..0.6);
    let cabin_h = rng.gen_range(0.08..0.15);
    let cabin_x = rng.gen_range(-0.12..0.05);
    let wheel_r = rng.gen_range(0.06..0.09);
    let wheel_t = rng.gen_range(0.04..0.07);
    let total = wheel_r + body_h + cabin_h;
    let body_z = -0.5 * total + wheel_r + 0.5 * body_h;
    let mut parts = vec![
        (
            Solid::Box {
                center: [0.0, 0.0, body_z],
                half: [0.5 * length, 0.5 * width, 0.5 * body_h],
            },
            0,
        ),
        (
            Solid::Box {
                center: [cabin_x, 0.0, body_z + 0.5 * body_h + 0.5 * cabin_h],
                half: [0.5 * cabin_l, 0.5 * width * 0.85, 0.5 * cabin_h],
            },
            1,
        ),
    ];
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            parts.push((
                Solid::Cylinder {
                    center: [sx * length * 0.3, sy * (0.5 * width + 0.5 * wheel_t), -0.5 * total + wheel_r],
                    axis: 1,
                    radius: wheel_r,
                    half_len: 0.5 * wheel_t,
                },
                2,
            ));
        }
    }
    parts
}

fn plane<R: Rng + ?Sized>(rng: &mut R) -> Vec<Part> {
    let length = rng.gen_range(0.8..0.95);
    let radius = rng.gen_range(0.05..0.08);
    let span = rng.gen_range(0.7..0.95);
    let chord = rng.gen_range(0.15..0.25);
    let wing_x = rng.gen_range(-0.05..0.12);
    let tail_span = rng.gen_range(0.25..0.35);
    let tail_chord = rng.gen_range(0.08..0.12);
    let fin_h = rng.gen_range(0.12..0.2);
    let thin = 0.02;
    let rear = -0.5 * length + 0.5 * tail_chord;
    let z0 = -0.5 * fin_h;
    vec![
        (
            Solid::Cylinder {
                center: [0.0, 0.0, z0],
                axis: 0,
                radius,
                half_len: 0.5 * length,
            },
            0,
        ),
        (
            Solid::Box {
                center: [wing_x, 0.0, z0],
                half: [0.5 * chord, 0.5 * span, 0.5 * thin],
            },
            1,
        ),
        (
            Solid::Box {
                center: [rear, 0.0, z0],
                half: [0.5 * tail_chord, 0.5 * tail_span, 0.5 * thin],
            },
            2,
        ),
        (
            Solid::Box {
                center: [rear, 0.0, z0 + radius + 0.5 * fin_h],
                half: [0.5 * tail_chord, 0.5 * thin, 0.5 * fin_h],
            },
            2,
        ),
    ]
}

/// Samples a random instance of `category` with `n` surface points
/// (`n` rounded up to even), per-part colors and part labels.
///
/// Points are drawn on the whole surface, folded onto `y > 0` and mirrored,
/// so the cloud is exactly symmetric about the xz-plane.
pub fn sample_instance<R: Rng + ?Sized>(category: Category, n: usize, rng: &mut R) -> PointCloud {
    let parts = match category {
        Category::ChairLike => chair(rng),
        Category::CarLike => car(rng),
        Category::PlaneLike => plane(rng),
    };
    let palette: Vec<[f64; 3]> = (0..3)
        .map(|_| [rng.gen_range(0.05..0.85), rng.gen_range(0.05..0.85), rng.gen_range(0.05..0.85)])
        .collect();
    let areas: Vec<f64> = parts.iter().map(|(s, _)| s.area()).collect();
    let total: f64 = areas.iter().sum();
    let half = n.div_ceil(2);
    let mut points = Vec::with_capacity(2 * half);
    let mut colors = Vec::with_capacity(2 * half);
    let mut labels = Vec::with_capacity(2 * half);
    while points.len() < 2 * half {
        let mut pick = rng.gen_range(0.0..total);
        let mut idx = parts.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                idx = i;
                break;
            }
            pick -= a;
        }
        let (solid, label) = parts[idx];
        let p = solid.sample(rng);
        if p[1] == 0.0 {
            continue;
        }
        let y = p[1].abs();
        let c = palette[label as usize];
        points.push([p[0], y, p[2]]);
        points.push([p[0], -y, p[2]]);
        colors.extend([c, c]);
        labels.extend([label, label]);
    }
    PointCloud::with_colors(points, colors)
        .and_then(|c| c.with_labels(labels))
        .expect("sized together")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::symmetry_loss;
    use crate::diffcore::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn instances_fit_unit_cube_and_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cat in Category::ALL {
            for _ in 0..10 {
                let c = sample_instance(cat, 1000, &mut rng);
                assert_eq!(c.len(), 1000);
                assert!(c.points.iter().all(|p| p.iter().all(|v| v.abs() <= 0.5)), "{cat:?}");
                let tape = Tape::new();
                let (l, flag) = symmetry_loss(tape.constant(c.positions_tensor())).unwrap();
                assert!(!flag);
                assert!(l.item() <= 1e-12);
                let labels = c.labels.as_ref().unwrap();
                for part in 0..3 {
                    assert!(labels.contains(&part));
                }
            }
        }
    }

    #[test]
    fn category_names_round_trip() {
        for c in Category::ALL {
            assert_eq!(c.name().parse::<Category>().unwrap(), c);
        }
        assert!("boat".parse::<Category>().is_err());
    }
}
