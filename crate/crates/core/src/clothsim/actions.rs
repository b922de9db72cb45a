//! Random action sequences for data collection.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ActionStep;
use crate::error::{Error, Result};
use crate::geometry::{self, ClothMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Random vertex, randomized direction with a fold or pick-and-place bias.
    Directional,
    /// Move one vertex onto another along a lifting arc.
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionSampling {
    pub min_len: usize,
    pub max_len: usize,
    pub min_magnitude: f64,
    pub max_magnitude: f64,
    /// Lowest allowed gripper height.
    pub floor: f64,
}

impl Default for ActionSampling {
    fn default() -> Self {
        Self {
            min_len: 15,
            max_len: 35,
            min_magnitude: 0.02,
            max_magnitude: 0.05,
            floor: 1e-3,
        }
    }
}

impl ActionSampling {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::Config("action length range is empty".into()));
        }
        if !(self.min_magnitude > 0.0 && self.min_magnitude <= self.max_magnitude) {
            return Err(Error::Config("action magnitude range is invalid".into()));
        }
        Ok(())
    }
}

pub fn sample_action_sequence<R: Rng + ?Sized>(
    mesh: &ClothMesh,
    strategy: Strategy,
    cfg: &ActionSampling,
    rng: &mut R,
) -> Result<Vec<ActionStep>> {
    cfg.validate()?;
    if mesh.n_vertices() == 0 {
        return Err(Error::Domain(
            "cannot sample actions on an empty mesh".into(),
        ));
    }
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    match strategy {
        Strategy::Directional => Ok(directional(mesh, len, cfg, rng)),
        Strategy::Pairwise => pairwise(mesh, len, cfg, rng),
    }
}

fn magnitude<R: Rng + ?Sized>(cfg: &ActionSampling, rng: &mut R) -> f64 {
    if cfg.min_magnitude == cfg.max_magnitude {
        cfg.min_magnitude
    } else {
        rng.random_range(cfg.min_magnitude..=cfg.max_magnitude)
    }
}

fn normalize(v: Vec3) -> Vec3 {
    let n = geometry::norm(v);
    if n > 0.0 {
        geometry::scale(v, 1.0 / n)
    } else {
        [0.0, 0.0, 1.0]
    }
}

fn directional<R: Rng + ?Sized>(
    mesh: &ClothMesh,
    len: usize,
    cfg: &ActionSampling,
    rng: &mut R,
) -> Vec<ActionStep> {
    let v = mesh.vertices();
    let g = rng.random_range(0..v.len());
    let fold = rng.random_bool(0.5);
    let horizontal = if fold {
        // Across the cloth: towards the centroid, rotated by up to 45 degrees.
        let c = geometry::centroid(v);
        let to_c = [c[0] - v[g][0], c[1] - v[g][1], 0.0];
        let base = if geometry::norm(to_c) > 1e-9 {
            to_c[1].atan2(to_c[0])
        } else {
            rng.random_range(0.0..std::f64::consts::TAU)
        };
        let a = base + rng.random_range(-std::f64::consts::FRAC_PI_4..=std::f64::consts::FRAC_PI_4);
        [a.cos(), a.sin(), 0.0]
    } else {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        [a.cos(), a.sin(), 0.0]
    };
    let mut pos = v[g];
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let phase = (i as f64 + 0.5) / len as f64;
        let base = if fold {
            // lift, carry, lower
            if phase < 0.3 {
                geometry::add(horizontal, [0.0, 0.0, 1.0])
            } else if phase < 0.7 {
                horizontal
            } else {
                geometry::add(horizontal, [0.0, 0.0, -1.0])
            }
        } else if phase < 0.4 {
            geometry::add(geometry::scale(horizontal, 0.3), [0.0, 0.0, 1.0])
        } else {
            horizontal
        };
        let jitter: Vec3 = std::array::from_fn(|_| {
            let z: f64 = StandardNormal.sample(rng);
            0.3 * z
        });
        let mut dir = normalize(geometry::add(normalize(base), jitter));
        if pos[2] + dir[2] * cfg.max_magnitude < cfg.floor && dir[2] < 0.0 {
            dir[2] = -dir[2];
        }
        let delta = geometry::scale(dir, magnitude(cfg, rng));
        pos = geometry::add(pos, delta);
        out.push(ActionStep {
            grasp_index: g,
            delta,
        });
    }
    out
}

/// `n` points on the upward-bulging circular arc from `a` to `b` whose
/// consecutive chords all have length `step`; the last point is `b`.
///
/// Requires `n * step > |b - a|`. Long paths between close vertices become
/// near-full loops, which keeps the curvature bounded by the step length.
fn circular_arc(a: Vec3, b: Vec3, step: f64, n: usize) -> Vec<Vec3> {
    let d = geometry::dist(a, b);
    // Chord spanned by n equal chords of length `step` on a circle that
    // subtends `theta`; it decreases monotonically from n*step to 0.
    let span = |theta: f64| step * (0.5 * theta).sin() / (0.5 * theta / n as f64).sin();
    let (mut lo, mut hi) = (1e-9, 2.0 * std::f64::consts::PI - 1e-9);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if span(mid) > d {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = 0.5 * (lo + hi);
    let r = step / (2.0 * (0.5 * theta / n as f64).sin());
    let u = normalize(geometry::sub(b, a));
    let up = [0.0, 0.0, 1.0];
    let w = {
        let off = geometry::sub(up, geometry::scale(u, geometry::dot(up, u)));
        if geometry::norm(off) > 1e-9 {
            normalize(off)
        } else {
            [1.0, 0.0, 0.0]
        }
    };
    let mid = geometry::scale(geometry::add(a, b), 0.5);
    let yc = -r * (0.5 * theta).cos();
    let start = (-yc).atan2(-0.5 * d);
    (1..=n)
        .map(|i| {
            if i == n {
                return b;
            }
            let phi = start - theta * i as f64 / n as f64;
            let x = r * phi.cos();
            let y = yc + r * phi.sin();
            geometry::add(
                mid,
                geometry::add(geometry::scale(u, x), geometry::scale(w, y)),
            )
        })
        .collect()
}

fn pairwise<R: Rng + ?Sized>(
    mesh: &ClothMesh,
    len: usize,
    cfg: &ActionSampling,
    rng: &mut R,
) -> Result<Vec<ActionStep>> {
    let v = mesh.vertices();
    let src = rng.random_range(0..v.len());
    let step = magnitude(cfg, rng);
    let path = step * len as f64;
    // Targets farther away are preferred; the arc must be able to absorb
    // the full path length, so the straight-line distance is capped.
    let weights: Vec<f64> = v
        .iter()
        .map(|&p| {
            let d = geometry::dist(p, v[src]);
            if d > 0.05 && d < 0.9 * path {
                d
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        // Degenerate cloth (tiny or single vertex): lift in place.
        return Ok((0..len)
            .map(|_| ActionStep {
                grasp_index: src,
                delta: [0.0, 0.0, step],
            })
            .collect());
    }
    let mut r = rng.random_range(0.0..total);
    let mut dst = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            dst = i;
            if r < *w {
                break;
            }
            r -= w;
        }
    }
    let (a, b) = (v[src], v[dst]);
    let waypoints = circular_arc(a, b, step, len);
    let mut prev = a;
    let mut out = Vec::with_capacity(len);
    for w in waypoints {
        let mut delta = geometry::sub(w, prev);
        // Keep the exact step length while staying above the floor.
        if prev[2] + delta[2] < cfg.floor {
            delta[2] = cfg.floor - prev[2];
            let hz = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
            let want = (step * step - delta[2] * delta[2]).max(0.0).sqrt();
            if hz > 0.0 {
                delta[0] *= want / hz;
                delta[1] *= want / hz;
            }
        }
        prev = geometry::add(prev, delta);
        out.push(ActionStep {
            grasp_index: src,
            delta,
        });
    }
    Ok(out)
}

/// Moves vertex `from` onto the initial position of vertex `to` in `n`
/// steps of length `step` along an upward circular arc.
pub fn fold_actions(
    mesh: &ClothMesh,
    from: usize,
    to: usize,
    n: usize,
    step: f64,
) -> Result<Vec<ActionStep>> {
    let v = mesh.vertices();
    if from >= v.len() || to >= v.len() {
        return Err(Error::Domain("fold vertex out of range".into()));
    }
    if n == 0 || !(n as f64 * step > geometry::dist(v[from], v[to])) {
        return Err(Error::Domain(
            "fold path is shorter than the vertex distance".into(),
        ));
    }
    let mut prev = v[from];
    Ok(circular_arc(v[from], v[to], step, n)
        .into_iter()
        .map(|p| {
            let d = geometry::sub(p, prev);
            prev = p;
            ActionStep {
                grasp_index: from,
                delta: d,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clothsim::make_grid_cloth;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pairwise_lands_on_target() {
        let mesh = make_grid_cloth(8, 8, 0.05, 1e-3).unwrap();
        let cfg = ActionSampling::default();
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let acts = sample_action_sequence(&mesh, Strategy::Pairwise, &cfg, &mut rng).unwrap();
            let g = acts[0].grasp_index;
            let end = acts
                .iter()
                .fold(mesh.vertices()[g], |p, a| geometry::add(p, a.delta));
            let nearest = mesh
                .vertices()
                .iter()
                .map(|&v| geometry::dist(v, end))
                .fold(f64::INFINITY, f64::min);
            assert!(
                nearest < 0.01,
                "seed {seed}: end {end:?} is {nearest} from the nearest vertex"
            );
            for a in &acts {
                let m = geometry::norm(a.delta);
                assert!((0.02 - 1e-12..=0.05 + 1e-12).contains(&m), "magnitude {m}");
                assert!(a.grasp_index == g);
            }
        }
    }

    #[test]
    fn magnitudes_and_lengths() {
        let mesh = make_grid_cloth(8, 8, 0.05, 1e-3).unwrap();
        let cfg = ActionSampling::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut seen_min = false;
        let mut seen_max = false;
        for i in 0..1000 {
            let s = if i % 2 == 0 {
                Strategy::Directional
            } else {
                Strategy::Pairwise
            };
            let acts = sample_action_sequence(&mesh, s, &cfg, &mut rng).unwrap();
            assert!((15..=35).contains(&acts.len()));
            seen_min |= acts.len() == 15;
            seen_max |= acts.len() == 35;
            for a in &acts {
                let m = geometry::norm(a.delta);
                assert!((0.02 - 1e-12..=0.05 + 1e-12).contains(&m), "magnitude {m}");
            }
        }
        assert!(seen_min && seen_max);
    }

    #[test]
    fn fold_actions_end_on_target() {
        let mesh = make_grid_cloth(3, 3, 0.1, 0.0).unwrap();
        let acts = fold_actions(&mesh, 0, 8, 20, 0.05).unwrap();
        let end = acts
            .iter()
            .fold(mesh.vertices()[0], |p, a| geometry::add(p, a.delta));
        assert!(geometry::dist(end, mesh.vertices()[8]) < 1e-12);
        for a in &acts {
            assert!((geometry::norm(a.delta) - 0.05).abs() < 1e-9);
        }
        let top = acts.iter().scan(0.0, |z, a| {
            *z += a.delta[2];
            Some(*z)
        });
        assert!(top.fold(0.0, f64::max) > 0.1);
        assert!(fold_actions(&mesh, 0, 8, 2, 0.05).is_err());
    }
}
