//! Mass-spring cloth simulator integrated with semi-implicit (symplectic)
//! Euler. It plays the role of the ground-truth transition function: it
//! generates training data and evaluates action sequences for the planner.

mod actions;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, ClothMesh, EdgeKind, Topology, Vec3};

pub use actions::{fold_actions, sample_action_sequence, ActionSampling, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Structural spring stiffness (N/m).
    pub stretch_stiffness: f64,
    /// Diagonal spring stiffness (N/m).
    pub shear_stiffness: f64,
    /// Two-hop spring stiffness (N/m).
    pub bend_stiffness: f64,
    /// Global viscous damping (1/s).
    pub damping: f64,
    /// Dashpot coefficient along every spring (N s/m).
    pub spring_damping: f64,
    /// kg/m^3
    pub density: f64,
    /// m
    pub thickness: f64,
    pub friction: f64,
    /// m/s^2 along z.
    pub gravity: f64,
    /// Integration substep (s).
    pub dt: f64,
    /// Substeps spent moving the gripper during one action step.
    pub substeps: usize,
    /// Substeps with the gripper held still after each action step.
    pub settle_substeps: usize,
    pub ground_height: f64,
    pub collision_margin: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            stretch_stiffness: 1e3,
            shear_stiffness: 1e2,
            bend_stiffness: 1e-3,
            damping: 1e-2,
            spring_damping: 0.5,
            density: 1e3,
            thickness: 1e-3,
            friction: 0.5,
            gravity: -9.81,
            dt: 5e-4,
            substeps: 120,
            settle_substeps: 60,
            ground_height: 0.0,
            collision_margin: 1e-3,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let stiff = [
            self.stretch_stiffness,
            self.shear_stiffness,
            self.bend_stiffness,
        ];
        if stiff.iter().any(|&k| !(k >= 0.0)) {
            return Err(Error::Config("stiffnesses must be >= 0".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be > 0".into()));
        }
        if self.substeps < 1 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        if !(self.density > 0.0 && self.thickness > 0.0) {
            return Err(Error::Config("density and thickness must be > 0".into()));
        }
        Ok(())
    }

    /// Lowest admissible vertex height.
    pub fn floor(&self) -> f64 {
        self.ground_height + self.collision_margin
    }
}

/// A vertex pinned to a gripper position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspConstraint {
    pub vertex_index: usize,
    pub target_position: Vec3,
}

/// A relative gripper displacement applied to one grasped vertex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionStep {
    pub grasp_index: usize,
    pub delta: Vec3,
}

/// Positions plus velocities.
#[derive(Debug, Clone)]
pub struct ClothState {
    pub mesh: ClothMesh,
    pub velocities: Vec<Vec3>,
}

impl ClothState {
    pub fn at_rest(mesh: ClothMesh) -> Self {
        let n = mesh.n_vertices();
        Self {
            mesh,
            velocities: vec![[0.0; 3]; n],
        }
    }
}

/// Planar `rows x cols` grid at rest on the ground.
///
/// Structural edges join 4-neighbours, shear edges both cell diagonals and
/// bend edges vertices two apart along a row or column. Each cell is split
/// into two triangles along its main diagonal.
pub fn make_grid_cloth(rows: usize, cols: usize, spacing: f64, height: f64) -> Result<ClothMesh> {
    if rows < 2 || cols < 2 {
        return Err(Error::Domain(
            "grid cloth needs at least 2 rows and 2 columns".into(),
        ));
    }
    if !(spacing > 0.0) {
        return Err(Error::Domain("grid spacing must be > 0".into()));
    }
    let id = |r: usize, c: usize| r * cols + c;
    let mut vertices = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            vertices.push([c as f64 * spacing, r as f64 * spacing, height]);
        }
    }
    let mut edges = Vec::new();
    let mut kinds = Vec::new();
    let mut push = |a: usize, b: usize, k: EdgeKind| {
        edges.push([a, b]);
        kinds.push(k);
    };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                push(id(r, c), id(r, c + 1), EdgeKind::Structural);
            }
            if r + 1 < rows {
                push(id(r, c), id(r + 1, c), EdgeKind::Structural);
            }
        }
    }
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            push(id(r, c), id(r + 1, c + 1), EdgeKind::Shear);
            push(id(r, c + 1), id(r + 1, c), EdgeKind::Shear);
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            if c + 2 < cols {
                push(id(r, c), id(r, c + 2), EdgeKind::Bend);
            }
            if r + 2 < rows {
                push(id(r, c), id(r + 2, c), EdgeKind::Bend);
            }
        }
    }
    let mut faces = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            faces.push([id(r, c), id(r, c + 1), id(r + 1, c + 1)]);
            faces.push([id(r, c), id(r + 1, c + 1), id(r + 1, c)]);
        }
    }
    let topo = Topology::new(rows * cols, edges, kinds, faces)?;
    ClothMesh::new(vertices, Arc::new(topo))
}

/// Semi-implicit Euler mass-spring integrator bound to one cloth instance.
#[derive(Debug, Clone)]
pub struct Simulator {
    params: SimParams,
    topology: Arc<Topology>,
    rest_lengths: Vec<f64>,
    stiffness: Vec<f64>,
    mass: f64,
}

impl Simulator {
    /// Rest lengths are taken from `canonical`. Vertex mass is lumped
    /// uniformly from the total surface area.
    pub fn new(canonical: &ClothMesh, params: SimParams) -> Result<Self> {
        params.validate()?;
        let v = canonical.vertices();
        let topology = Arc::clone(canonical.topology());
        let rest_lengths = topology
            .edges()
            .iter()
            .map(|e| geometry::dist(v[e[0]], v[e[1]]))
            .collect();
        let stiffness = topology
            .edge_kinds()
            .iter()
            .map(|k| match k {
                EdgeKind::Structural => params.stretch_stiffness,
                EdgeKind::Shear => params.shear_stiffness,
                EdgeKind::Bend => params.bend_stiffness,
            })
            .collect();
        let area: f64 = canonical
            .faces()
            .iter()
            .map(|f| {
                0.5 * geometry::norm(geometry::cross(
                    geometry::sub(v[f[1]], v[f[0]]),
                    geometry::sub(v[f[2]], v[f[0]]),
                ))
            })
            .sum();
        let n = canonical.n_vertices().max(1) as f64;
        // Meshes without faces (test fixtures) fall back to 1 g per vertex.
        let mass = if area > 0.0 {
            params.density * params.thickness * area / n
        } else {
            1e-3
        };
        Ok(Self {
            params,
            topology,
            rest_lengths,
            stiffness,
            mass,
        })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn vertex_mass(&self) -> f64 {
        self.mass
    }

    fn check_state(&self, state: &ClothState) -> Result<()> {
        if !Arc::ptr_eq(state.mesh.topology(), &self.topology)
            && **state.mesh.topology() != *self.topology
        {
            return Err(Error::Correspondence(
                "state connectivity differs from the simulator's cloth".into(),
            ));
        }
        if state.velocities.len() != state.mesh.n_vertices() {
            return Err(Error::Correspondence(
                "velocity count differs from vertex count".into(),
            ));
        }
        Ok(())
    }

    /// Advances the state by one substep `dt`.
    pub fn step(&self, state: &mut ClothState, grasp: Option<&GraspConstraint>) -> Result<()> {
        self.check_state(state)?;
        if let Some(g) = grasp {
            if g.vertex_index >= state.mesh.n_vertices() {
                return Err(Error::Domain(format!(
                    "grasp index {} out of range",
                    g.vertex_index
                )));
            }
        }
        self.substep(state, grasp, 0)
    }

    fn substep(
        &self,
        state: &mut ClothState,
        grasp: Option<&GraspConstraint>,
        substep: usize,
    ) -> Result<()> {
        let p = &self.params;
        let dt = p.dt;
        let m = self.mass;
        let x = state.mesh.vertices_mut();
        let v = &mut state.velocities;
        let n = x.len();

        let mut force = vec![[0.0, 0.0, m * p.gravity]; n];
        for i in 0..n {
            for d in 0..3 {
                force[i][d] -= p.damping * m * v[i][d];
            }
        }
        for (e, (&rest, &k)) in self
            .topology
            .edges()
            .iter()
            .zip(self.rest_lengths.iter().zip(&self.stiffness))
        {
            let (a, b) = (e[0], e[1]);
            let d = geometry::sub(x[b], x[a]);
            let len = geometry::norm(d);
            if len <= 1e-12 {
                continue;
            }
            let dir = geometry::scale(d, 1.0 / len);
            let rel_v = geometry::dot(geometry::sub(v[b], v[a]), dir);
            let mag = k * (len - rest) + p.spring_damping * rel_v;
            for c in 0..3 {
                force[a][c] += mag * dir[c];
                force[b][c] -= mag * dir[c];
            }
        }

        let floor = p.floor();
        let grasped = grasp.map(|g| g.vertex_index);
        for i in 0..n {
            for d in 0..3 {
                v[i][d] += dt * force[i][d] / m;
                x[i][d] += dt * v[i][d];
            }
            if Some(i) == grasped {
                continue;
            }
            if x[i][2] < floor {
                x[i][2] = floor;
                let vn = v[i][2];
                if vn < 0.0 {
                    v[i][2] = 0.0;
                    // Coulomb friction: the normal impulse bounds the tangential one.
                    let vt = (v[i][0] * v[i][0] + v[i][1] * v[i][1]).sqrt();
                    if vt > 0.0 {
                        let s = (vt + p.friction * vn).max(0.0) / vt;
                        v[i][0] *= s;
                        v[i][1] *= s;
                    }
                }
            }
        }
        if let Some(g) = grasp {
            let i = g.vertex_index;
            let old = geometry::sub(x[i], geometry::scale(v[i], dt));
            x[i] = g.target_position;
            v[i] = geometry::scale(geometry::sub(g.target_position, old), 1.0 / dt);
        }
        for i in 0..n {
            if x[i].iter().chain(v[i].iter()).any(|c| !c.is_finite()) {
                return Err(Error::SimulationBlowup { vertex: i, substep });
            }
        }
        Ok(())
    }

    /// Runs `n` substeps with an optional fixed grasp.
    pub fn settle(
        &self,
        state: &mut ClothState,
        n: usize,
        grasp: Option<&GraspConstraint>,
    ) -> Result<()> {
        self.check_state(state)?;
        for s in 0..n {
            self.substep(state, grasp, s)?;
        }
        Ok(())
    }

    /// Moves the grasped vertex by `action.delta` (linearly over
    /// `substeps`), then holds it for `settle_substeps`.
    ///
    /// The gripper never goes below the collision floor.
    pub fn execute(&self, state: &mut ClothState, action: &ActionStep) -> Result<()> {
        self.check_state(state)?;
        let g = action.grasp_index;
        if g >= state.mesh.n_vertices() {
            return Err(Error::Domain(format!("grasp index {g} out of range")));
        }
        let start = state.mesh.vertices()[g];
        let mut end = geometry::add(start, action.delta);
        end[2] = end[2].max(self.params.floor());
        let n = self.params.substeps;
        for s in 1..=n {
            let t = s as f64 / n as f64;
            let target = if s == n {
                end
            } else {
                geometry::add(start, geometry::scale(geometry::sub(end, start), t))
            };
            let c = GraspConstraint {
                vertex_index: g,
                target_position: target,
            };
            self.substep(state, Some(&c), s)?;
        }
        let hold = GraspConstraint {
            vertex_index: g,
            target_position: end,
        };
        for s in 0..self.params.settle_substeps {
            self.substep(state, Some(&hold), n + s)?;
        }
        Ok(())
    }

    /// Lets the cloth evolve without a grasp for the duration of one action step.
    pub fn release_step(&self, state: &mut ClothState) -> Result<()> {
        self.settle(
            state,
            self.params.substeps + self.params.settle_substeps,
            None,
        )
    }

    /// Applies each action and records the state after its settle phase.
    pub fn rollout(&self, state: &ClothState, actions: &[ActionStep]) -> Result<Vec<ClothState>> {
        if actions.is_empty() {
            return Err(Error::Domain("rollout needs at least one action".into()));
        }
        let mut cur = state.clone();
        let mut out = Vec::with_capacity(actions.len());
        for (step, a) in actions.iter().enumerate() {
            self.execute(&mut cur, a).map_err(|e| Error::Rollout {
                step,
                source: Box::new(e),
            })?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Same as [`Simulator::rollout`] but keeps only the meshes.
    pub fn rollout_meshes(
        &self,
        state: &ClothState,
        actions: &[ActionStep],
    ) -> Result<Vec<ClothMesh>> {
        Ok(self
            .rollout(state, actions)?
            .into_iter()
            .map(|s| s.mesh)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloth() -> (ClothMesh, Simulator) {
        let p = SimParams::default();
        let mesh = make_grid_cloth(8, 8, 0.05, p.floor()).unwrap();
        let sim = Simulator::new(&mesh, p).unwrap();
        (mesh, sim)
    }

    #[test]
    fn grid_edge_counts() {
        let m = make_grid_cloth(2, 2, 1.0, 0.0).unwrap();
        let t = m.topology();
        assert_eq!(m.n_vertices(), 4);
        assert_eq!(t.count_edges(EdgeKind::Structural), 4);
        assert_eq!(t.count_edges(EdgeKind::Shear), 2);
        assert_eq!(t.count_edges(EdgeKind::Bend), 0);
        assert_eq!(m.faces().len(), 2);

        let m = make_grid_cloth(3, 3, 0.1, 0.0).unwrap();
        assert_eq!(m.n_vertices(), 9);
        assert_eq!(m.topology().count_edges(EdgeKind::Structural), 12);
        let v = m.vertices();
        for (e, k) in m.edges().iter().zip(m.topology().edge_kinds()) {
            if *k == EdgeKind::Structural {
                assert!((geometry::dist(v[e[0]], v[e[1]]) - 0.1).abs() < 1e-15);
            }
        }
        assert!(make_grid_cloth(1, 3, 0.1, 0.0).is_err());
    }

    #[test]
    fn flat_cloth_on_ground_stays_put() {
        let (mesh, sim) = cloth();
        let mut s = ClothState::at_rest(mesh.clone());
        for _ in 0..100 {
            sim.step(&mut s, None).unwrap();
        }
        for (a, b) in s.mesh.vertices().iter().zip(mesh.vertices()) {
            assert!(geometry::dist(*a, *b) < 1e-9);
        }
    }

    #[test]
    fn free_fall_matches_kinematics() {
        let topo = Arc::new(Topology::new(1, vec![], vec![], vec![]).unwrap());
        let mesh = ClothMesh::new(vec![[0.0, 0.0, 0.0]], topo).unwrap();
        let p = SimParams {
            damping: 0.0,
            ground_height: -1e9,
            dt: 1e-3,
            ..SimParams::default()
        };
        let sim = Simulator::new(&mesh, p.clone()).unwrap();
        let mut s = ClothState::at_rest(mesh);
        let n = 50;
        for _ in 0..n {
            sim.step(&mut s, None).unwrap();
        }
        let t = n as f64 * p.dt;
        let exact = 0.5 * p.gravity * t * t;
        let z = s.mesh.vertices()[0][2];
        assert!(
            ((z - exact) / exact).abs() <= 0.02 + 1e-12,
            "z={z} exact={exact}"
        );
    }

    #[test]
    fn pinned_corner_drapes_and_is_exact() {
        let (mesh, sim) = cloth();
        let mut s = ClothState::at_rest(mesh);
        let target = [0.0, 0.0, 0.5];
        let g = GraspConstraint {
            vertex_index: 0,
            target_position: target,
        };
        for _ in 0..200 {
            sim.step(&mut s, Some(&g)).unwrap();
            assert_eq!(s.mesh.vertices()[0], target);
        }
        assert!(s.mesh.vertices()[9][2] > sim.params().floor() + 1e-3);
    }

    #[test]
    fn momentum_conserved_without_external_forces() {
        let mesh = make_grid_cloth(4, 4, 0.05, 0.0).unwrap();
        let p = SimParams {
            gravity: 0.0,
            damping: 0.0,
            ground_height: -1e9,
            ..SimParams::default()
        };
        let sim = Simulator::new(&mesh, p).unwrap();
        let mut s = ClothState::at_rest(mesh);
        for (i, v) in s.velocities.iter_mut().enumerate() {
            *v = [
                (i as f64 * 0.37).sin(),
                (i as f64 * 0.11).cos(),
                0.2 * (i % 3) as f64,
            ];
        }
        let momentum = |s: &ClothState| {
            s.velocities
                .iter()
                .fold([0.0; 3], |a, v| geometry::add(a, *v))
        };
        let mut before = momentum(&s);
        for _ in 0..50 {
            sim.step(&mut s, None).unwrap();
            let after = momentum(&s);
            for d in 0..3 {
                assert!((after[d] - before[d]).abs() * sim.vertex_mass() < 1e-9);
            }
            before = after;
        }
    }

    #[test]
    fn zero_actions_keep_flat_cloth() {
        let (mesh, sim) = cloth();
        let s = ClothState::at_rest(mesh.clone());
        let actions = vec![
            ActionStep {
                grasp_index: 5,
                delta: [0.0; 3]
            };
            3
        ];
        for m in sim.rollout_meshes(&s, &actions).unwrap() {
            for (a, b) in m.vertices().iter().zip(mesh.vertices()) {
                assert!(geometry::dist(*a, *b) < 1e-6);
            }
        }
    }

    #[test]
    fn lifting_is_exact() {
        let (mesh, sim) = cloth();
        let s = ClothState::at_rest(mesh.clone());
        let dz = [0.03, 0.05, 0.02, 0.04];
        let actions: Vec<_> = dz
            .iter()
            .map(|&z| ActionStep {
                grasp_index: 0,
                delta: [0.0, 0.0, z],
            })
            .collect();
        let out = sim.rollout_meshes(&s, &actions).unwrap();
        let mut z = mesh.vertices()[0][2];
        for (m, d) in out.iter().zip(dz) {
            z += d;
            assert_eq!(m.vertices()[0][2], z);
        }
    }

    #[test]
    fn rollout_errors_carry_step() {
        let (mesh, sim) = cloth();
        let s = ClothState::at_rest(mesh);
        let bad = vec![
            ActionStep {
                grasp_index: 0,
                delta: [0.0; 3],
            },
            ActionStep {
                grasp_index: 999,
                delta: [0.0; 3],
            },
        ];
        assert!(matches!(
            sim.rollout(&s, &bad),
            Err(Error::Rollout { step: 1, .. })
        ));
        assert!(sim.rollout(&s, &[]).is_err());
    }

    #[test]
    fn blowup_is_reported() {
        let mesh = make_grid_cloth(3, 3, 0.05, 0.0).unwrap();
        let p = SimParams {
            dt: 0.5,
            ..SimParams::default()
        };
        let sim = Simulator::new(&mesh, p).unwrap();
        let mut s = ClothState::at_rest(mesh);
        s.velocities[4] = [50.0, 0.0, 0.0];
        let mut err = None;
        for _ in 0..2000 {
            if let Err(e) = sim.step(&mut s, None) {
                err = Some(e);
                break;
            }
        }
        assert!(matches!(err, Some(Error::SimulationBlowup { .. })));
    }
}
