//! Planar finite element model of a tendon-driven soft finger.
//!
//! Elements are constant-strain triangles with a plane-strain
//! St. Venant–Kirchhoff density. Cables are unilateral springs routed
//! through via nodes:
//!
//! ```text
//! E(u, x) = Σ_e W(F_e) A_e h + Σ_c ½ k_c max(0, L_c(x) - (L0_c - u_c))²
//! ```
//!
//! Equilibria `x(u)` are found by Newton's method on the free nodes, and
//! `dx/du = -H⁻¹ ∂²E/∂x∂u` feeds a projected gradient loop over `u`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EQUILIBRIUM_TOL: f64 = 1e-8;
pub const MAX_NEWTON_ITERATIONS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Material {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
}

impl Default for Material {
    fn default() -> Self {
        Material {
            youngs_modulus: 50e3,
            poisson_ratio: 0.3,
        }
    }
}

impl Material {
    pub fn validate(&self) -> Result<()> {
        if !(self.youngs_modulus > 0.0 && self.youngs_modulus.is_finite()) {
            return Err(Error::config("material.youngs_modulus", "must be positive"));
        }
        if !(self.poisson_ratio > -1.0 && self.poisson_ratio < 0.5) {
            return Err(Error::config("material.poisson_ratio", "must lie in (-1, 0.5)"));
        }
        Ok(())
    }

    /// Plane-strain Lamé parameters `(λ, μ)`.
    pub fn lame(&self) -> (f64, f64) {
        let (e, nu) = (self.youngs_modulus, self.poisson_ratio);
        (e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), e / (2.0 * (1.0 + nu)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerMesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub fixed_nodes: Vec<usize>,
    #[serde(default)]
    pub material: Material,
    /// Out-of-plane thickness, m.
    pub thickness: f64,
}

/// Circular-arc finger discretized into `segments × layers` quads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArcSpec {
    pub center: [f64; 2],
    /// Radius of the mid surface, m.
    pub radius: f64,
    /// Radial width, m.
    pub width: f64,
    /// Angle of the clamped base, rad.
    pub start_angle: f64,
    /// Signed angular extent, rad.
    pub sweep: f64,
    pub segments: usize,
    pub layers: usize,
    pub thickness: f64,
    pub material: Material,
}

impl Default for ArcSpec {
    fn default() -> Self {
        ArcSpec {
            center: [0.0, -0.06],
            radius: 0.06,
            width: 0.012,
            start_angle: std::f64::consts::FRAC_PI_2,
            sweep: -200f64.to_radians(),
            segments: 16,
            layers: 2,
            thickness: 0.02,
            material: Material::default(),
        }
    }
}

impl ArcSpec {
    pub fn node(&self, segment: usize, layer: usize) -> usize {
        segment * (self.layers + 1) + layer
    }

    /// Layer on the convex side, which opens the finger when shortened.
    pub fn outer_layer(&self) -> usize {
        self.layers
    }

    /// Mirror image about the vertical line `x = axis`.
    pub fn mirrored(&self, axis: f64) -> ArcSpec {
        ArcSpec {
            center: [2.0 * axis - self.center[0], self.center[1]],
            start_angle: std::f64::consts::PI - self.start_angle,
            sweep: -self.sweep,
            ..self.clone()
        }
    }
}

impl FingerMesh {
    pub fn arc(spec: &ArcSpec) -> Result<FingerMesh> {
        if spec.segments == 0 || spec.layers == 0 {
            return Err(Error::config("arc.segments", "segments and layers must be positive"));
        }
        if !(spec.radius > spec.width / 2.0 && spec.width > 0.0) {
            return Err(Error::config("arc.width", "must be positive and below the diameter"));
        }
        let mut nodes = Vec::with_capacity((spec.segments + 1) * (spec.layers + 1));
        for i in 0..=spec.segments {
            let phi = spec.start_angle + spec.sweep * i as f64 / spec.segments as f64;
            for j in 0..=spec.layers {
                let r = spec.radius - spec.width / 2.0 + spec.width * j as f64 / spec.layers as f64;
                nodes.push([spec.center[0] + r * phi.cos(), spec.center[1] + r * phi.sin()]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * spec.segments * spec.layers);
        for i in 0..spec.segments {
            for j in 0..spec.layers {
                let (a, b, c, d) = (
                    spec.node(i, j),
                    spec.node(i + 1, j),
                    spec.node(i + 1, j + 1),
                    spec.node(i, j + 1),
                );
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
        let fixed_nodes = (0..=spec.layers).map(|j| spec.node(0, j)).collect();
        let mut mesh = FingerMesh {
            nodes,
            triangles,
            fixed_nodes,
            material: spec.material,
            thickness: spec.thickness,
        };
        mesh.orient();
        mesh.validate()?;
        Ok(mesh)
    }

    /// Straight strip clamped at x = 0, `segments` quads long, one quad high.
    pub fn strip(length: f64, height: f64, segments: usize, thickness: f64, material: Material) -> Result<FingerMesh> {
        if segments == 0 {
            return Err(Error::config("strip.segments", "must be positive"));
        }
        let mut nodes = Vec::new();
        for i in 0..=segments {
            let x = length * i as f64 / segments as f64;
            nodes.push([x, 0.0]);
            nodes.push([x, height]);
        }
        let mut triangles = Vec::new();
        for i in 0..segments {
            let (a, b, c, d) = (2 * i, 2 * i + 2, 2 * i + 3, 2 * i + 1);
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
        let mesh = FingerMesh {
            nodes,
            triangles,
            fixed_nodes: vec![0, 1],
            material,
            thickness,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Disjoint union. Returns the node index offset of `other`.
    pub fn merge(&self, other: &FingerMesh) -> Result<(FingerMesh, usize)> {
        if self.material != other.material || self.thickness != other.thickness {
            return Err(Error::config("mesh", "merged meshes must share material and thickness"));
        }
        let off = self.nodes.len();
        let mut out = self.clone();
        out.nodes.extend_from_slice(&other.nodes);
        out.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
        out.fixed_nodes.extend(other.fixed_nodes.iter().map(|n| n + off));
        Ok((out, off))
    }

    fn orient(&mut self) {
        for k in 0..self.triangles.len() {
            if self.rest_signed_area(k) < 0.0 {
                self.triangles[k].swap(1, 2);
            }
        }
    }

    fn rest_signed_area(&self, k: usize) -> f64 {
        let [a, b, c] = self.triangles[k];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    pub fn validate(&self) -> Result<()> {
        self.material.validate()?;
        if !(self.thickness > 0.0) {
            return Err(Error::config("mesh.thickness", "must be positive"));
        }
        if self.nodes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("mesh.nodes", "non-finite coordinate"));
        }
        let n = self.nodes.len();
        for (k, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&i| i >= n) {
                return Err(Error::config(format!("mesh.triangles[{k}]"), "node index out of range"));
            }
            if self.rest_signed_area(k) <= 0.0 {
                return Err(Error::config(
                    format!("mesh.triangles[{k}]"),
                    "inverted or degenerate at rest",
                ));
            }
        }
        if self.fixed_nodes.is_empty() {
            return Err(Error::config("mesh.fixed_nodes", "must not be empty"));
        }
        if let Some(&i) = self.fixed_nodes.iter().find(|&&i| i >= n) {
            return Err(Error::config("mesh.fixed_nodes", format!("node {i} out of range")));
        }
        Ok(())
    }

    pub fn rest_positions(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.nodes.len(), self.nodes.iter().flat_map(|p| p.iter().copied()))
    }

    /// Triangle containing both nodes, with weight ½ on each: the midpoint
    /// of their shared edge.
    pub fn edge_midpoint_anchor(&self, n0: usize, n1: usize) -> Option<BarycentricAnchor> {
        self.triangles.iter().enumerate().find_map(|(k, t)| {
            let i0 = t.iter().position(|&i| i == n0)?;
            let i1 = t.iter().position(|&i| i == n1)?;
            let mut weights = [0.0; 3];
            weights[i0] = 0.5;
            weights[i1] = 0.5;
            Some(BarycentricAnchor { element: k, weights })
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cable {
    pub via_nodes: Vec<usize>,
    /// N/m.
    pub stiffness: f64,
    /// Defaults to the path length at rest, so the cable is just taut at u = 0.
    #[serde(default)]
    pub rest_length: Option<f64>,
}

impl Cable {
    /// Cable along one layer of an arc finger, from base to tip.
    pub fn along_arc(spec: &ArcSpec, layer: usize, stiffness: f64) -> Cable {
        Cable {
            via_nodes: (0..=spec.segments).map(|i| spec.node(i, layer)).collect(),
            stiffness,
            rest_length: None,
        }
    }

    pub fn offset(&self, off: usize) -> Cable {
        Cable {
            via_nodes: self.via_nodes.iter().map(|n| n + off).collect(),
            ..self.clone()
        }
    }
}

/// Point inside a triangle given by barycentric weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarycentricAnchor {
    pub element: usize,
    pub weights: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FovPlane {
    pub point: Vector3<f64>,
    /// Unit normal pointing out of the allowed region.
    pub normal: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspObjectiveConfig {
    pub target: Vector3<f64>,
    pub anchors: [BarycentricAnchor; 2],
    #[serde(default)]
    pub fov_planes: Vec<FovPlane>,
    pub epsilon: f64,
    pub grasp_weight: f64,
    pub fov_weight: f64,
}

impl GraspObjectiveConfig {
    pub fn validate(&self, mesh: &FingerMesh) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config("objective.epsilon", "must be positive"));
        }
        if !(self.grasp_weight >= 0.0 && self.fov_weight >= 0.0) {
            return Err(Error::config("objective.weights", "must be non-negative"));
        }
        for (k, a) in self.anchors.iter().enumerate() {
            if a.element >= mesh.triangles.len() {
                return Err(Error::config(format!("objective.anchors[{k}].element"), "out of range"));
            }
            if (a.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::config(
                    format!("objective.anchors[{k}].weights"),
                    "must sum to 1",
                ));
            }
        }
        for (k, p) in self.fov_planes.iter().enumerate() {
            if (p.normal.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::config(
                    format!("objective.fov_planes[{k}].normal"),
                    "must be unit length",
                ));
            }
        }
        Ok(())
    }
}

/// Energy with its gradient and Hessian over all nodal coordinates.
#[derive(Clone, Debug)]
pub struct EnergyEval {
    pub energy: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// Elements with non-positive deformed area.
    pub inverted: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Equilibrium {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// `‖∂E/∂x‖∞` over the free coordinates.
    pub residual: f64,
    pub inverted: Vec<usize>,
}

/// Mesh and cables with precomputed rest quantities.
#[derive(Clone, Debug)]
pub struct FemModel {
    mesh: FingerMesh,
    cables: Vec<Cable>,
    rest: DVector<f64>,
    dm_inv: Vec<Matrix2<f64>>,
    volume: Vec<f64>,
    lambda: f64,
    mu: f64,
    rest_lengths: Vec<f64>,
    free: Vec<usize>,
}

fn stvk(f: &Matrix2<f64>, lambda: f64, mu: f64) -> (f64, Matrix2<f64>, Matrix2<f64>) {
    let e = 0.5 * (f.transpose() * f - Matrix2::identity());
    let tr = e.trace();
    let energy = mu * e.norm_squared() + 0.5 * lambda * tr * tr;
    let s = 2.0 * mu * e + lambda * tr * Matrix2::identity();
    (energy, f * s, s)
}

impl FemModel {
    pub fn new(mesh: FingerMesh, cables: Vec<Cable>) -> Result<FemModel> {
        mesh.validate()?;
        let n = mesh.nodes.len();
        let rest = mesh.rest_positions();
        let mut dm_inv = Vec::with_capacity(mesh.triangles.len());
        let mut volume = Vec::with_capacity(mesh.triangles.len());
        for (k, t) in mesh.triangles.iter().enumerate() {
            let dm = Self::edge_matrix(&rest, t);
            let inv = dm
                .try_inverse()
                .ok_or_else(|| Error::config(format!("mesh.triangles[{k}]"), "degenerate"))?;
            dm_inv.push(inv);
            volume.push(0.5 * dm.determinant() * mesh.thickness);
        }
        let mut rest_lengths = Vec::with_capacity(cables.len());
        for (c, cable) in cables.iter().enumerate() {
            if cable.via_nodes.len() < 2 {
                return Err(Error::config(
                    format!("cables[{c}].via_nodes"),
                    "needs at least two via nodes",
                ));
            }
            if cable.via_nodes.iter().any(|&i| i >= n) {
                return Err(Error::config(
                    format!("cables[{c}].via_nodes"),
                    "node index out of range",
                ));
            }
            if cable.via_nodes.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::config(
                    format!("cables[{c}].via_nodes"),
                    "consecutive via nodes coincide",
                ));
            }
            if !(cable.stiffness > 0.0 && cable.stiffness.is_finite()) {
                return Err(Error::config(format!("cables[{c}].stiffness"), "must be positive"));
            }
            let len = match cable.rest_length {
                Some(l) if l > 0.0 => l,
                Some(_) => return Err(Error::config(format!("cables[{c}].rest_length"), "must be positive")),
                None => Self::path_length(&rest, &cable.via_nodes),
            };
            rest_lengths.push(len);
        }
        let mut is_fixed = vec![false; n];
        for &i in &mesh.fixed_nodes {
            is_fixed[i] = true;
        }
        let free = (0..n)
            .filter(|&i| !is_fixed[i])
            .flat_map(|i| [2 * i, 2 * i + 1])
            .collect();
        let (lambda, mu) = mesh.material.lame();
        Ok(FemModel {
            mesh,
            cables,
            rest,
            dm_inv,
            volume,
            lambda,
            mu,
            rest_lengths,
            free,
        })
    }

    pub fn mesh(&self) -> &FingerMesh {
        &self.mesh
    }

    pub fn cables(&self) -> &[Cable] {
        &self.cables
    }

    pub fn n_dof(&self) -> usize {
        self.rest.len()
    }

    pub fn free_dofs(&self) -> &[usize] {
        &self.free
    }

    pub fn rest_positions(&self) -> &DVector<f64> {
        &self.rest
    }

    pub fn rest_lengths(&self) -> &[f64] {
        &self.rest_lengths
    }

    pub fn node(&self, x: &DVector<f64>, i: usize) -> Vector2<f64> {
        Vector2::new(x[2 * i], x[2 * i + 1])
    }

    fn edge_matrix(x: &DVector<f64>, t: &[usize; 3]) -> Matrix2<f64> {
        let p = |i: usize| Vector2::new(x[2 * i], x[2 * i + 1]);
        let (a, b, c) = (p(t[0]), p(t[1]), p(t[2]));
        Matrix2::from_columns(&[b - a, c - a])
    }

    fn path_length(x: &DVector<f64>, via: &[usize]) -> f64 {
        via.windows(2)
            .map(|w| (Vector2::new(x[2 * w[1]] - x[2 * w[0]], x[2 * w[1] + 1] - x[2 * w[0] + 1])).norm())
            .sum()
    }

    pub fn cable_length(&self, x: &DVector<f64>, cable: usize) -> f64 {
        Self::path_length(x, &self.cables[cable].via_nodes)
    }

    pub fn validate_control(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.cables.len() {
            return Err(Error::config(
                "u",
                format!("expected {} entries, got {}", self.cables.len(), u.len()),
            ));
        }
        for (c, (&v, &l)) in u.iter().zip(&self.rest_lengths).enumerate() {
            if !(v >= 0.0 && v <= l) {
                return Err(Error::config(format!("u[{c}]"), format!("{v} outside [0, {l}]")));
            }
        }
        Ok(())
    }

    fn check_x(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n_dof() {
            return Err(Error::config(
                "x",
                format!("expected {} coordinates, got {}", self.n_dof(), x.len()),
            ));
        }
        Ok(())
    }

    /// Cable extension beyond its effective rest length; positive when taut.
    fn stretch(&self, x: &DVector<f64>, u: &[f64], c: usize) -> f64 {
        self.cable_length(x, c) - (self.rest_lengths[c] - u[c])
    }

    /// Gradient of a cable's path length.
    fn length_gradient(&self, x: &DVector<f64>, c: usize) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_dof());
        for w in self.cables[c].via_nodes.windows(2) {
            let d = self.node(x, w[1]) - self.node(x, w[0]);
            let e = d / d.norm();
            for k in 0..2 {
                g[2 * w[1] + k] += e[k];
                g[2 * w[0] + k] -= e[k];
            }
        }
        g
    }

    pub fn energy_value(&self, x: &DVector<f64>, u: &[f64]) -> f64 {
        let mut total = 0.0;
        for (k, t) in self.mesh.triangles.iter().enumerate() {
            let f = Self::edge_matrix(x, t) * self.dm_inv[k];
            total += stvk(&f, self.lambda, self.mu).0 * self.volume[k];
        }
        for c in 0..self.cables.len() {
            let s = self.stretch(x, u, c);
            if s > 0.0 {
                total += 0.5 * self.cables[c].stiffness * s * s;
            }
        }
        total
    }

    pub fn energy(&self, x: &DVector<f64>, u: &[f64]) -> Result<EnergyEval> {
        self.check_x(x)?;
        if u.len() != self.cables.len() {
            return Err(Error::config("u", "length must match the number of cables"));
        }
        let n = self.n_dof();
        let mut energy = 0.0;
        let mut gradient = DVector::zeros(n);
        let mut hessian = DMatrix::zeros(n, n);
        let mut inverted = Vec::new();
        let (lambda, mu) = (self.lambda, self.mu);

        for (k, t) in self.mesh.triangles.iter().enumerate() {
            let dmi = self.dm_inv[k];
            let vol = self.volume[k];
            let f = Self::edge_matrix(x, t) * dmi;
            if f.determinant() <= 0.0 {
                inverted.push(k);
            }
            let (w, p, s) = stvk(&f, lambda, mu);
            energy += w * vol;
            let g = vol * p * dmi.transpose();
            let dofs = [2 * t[0], 2 * t[0] + 1, 2 * t[1], 2 * t[1] + 1, 2 * t[2], 2 * t[2] + 1];
            let local_grad = [
                -g[(0, 0)] - g[(0, 1)],
                -g[(1, 0)] - g[(1, 1)],
                g[(0, 0)],
                g[(1, 0)],
                g[(0, 1)],
                g[(1, 1)],
            ];
            for (a, &da) in dofs.iter().enumerate() {
                gradient[da] += local_grad[a];
            }
            for (b, &db) in dofs.iter().enumerate() {
                let (node, dim) = (b / 2, b % 2);
                let mut dds = Matrix2::zeros();
                match node {
                    0 => {
                        dds[(dim, 0)] = -1.0;
                        dds[(dim, 1)] = -1.0;
                    }
                    1 => dds[(dim, 0)] = 1.0,
                    _ => dds[(dim, 1)] = 1.0,
                }
                let df = dds * dmi;
                let de = 0.5 * (df.transpose() * f + f.transpose() * df);
                let ds = 2.0 * mu * de + lambda * de.trace() * Matrix2::identity();
                let dp = df * s + f * ds;
                let dg = vol * dp * dmi.transpose();
                let col = [
                    -dg[(0, 0)] - dg[(0, 1)],
                    -dg[(1, 0)] - dg[(1, 1)],
                    dg[(0, 0)],
                    dg[(1, 0)],
                    dg[(0, 1)],
                    dg[(1, 1)],
                ];
                for (a, &da) in dofs.iter().enumerate() {
                    hessian[(da, db)] += col[a];
                }
            }
        }

        for (c, cable) in self.cables.iter().enumerate() {
            let s = self.stretch(x, u, c);
            if s <= 0.0 {
                continue;
            }
            let k = cable.stiffness;
            energy += 0.5 * k * s * s;
            let gl = self.length_gradient(x, c);
            gradient.axpy(k * s, &gl, 1.0);
            hessian.ger(k, &gl, &gl, 1.0);
            for w in cable.via_nodes.windows(2) {
                let d = self.node(x, w[1]) - self.node(x, w[0]);
                let len = d.norm();
                let e = d / len;
                let block = (Matrix2::identity() - e * e.transpose()) * (k * s / len);
                for (i, j, sign) in [
                    (w[0], w[0], 1.0),
                    (w[1], w[1], 1.0),
                    (w[0], w[1], -1.0),
                    (w[1], w[0], -1.0),
                ] {
                    for r in 0..2 {
                        for q in 0..2 {
                            hessian[(2 * i + r, 2 * j + q)] += sign * block[(r, q)];
                        }
                    }
                }
            }
        }

        Ok(EnergyEval {
            energy,
            gradient,
            hessian,
            inverted,
        })
    }

    fn reduce(&self, eval: &EnergyEval) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.free.len();
        let g = DVector::from_iterator(m, self.free.iter().map(|&i| eval.gradient[i]));
        let h = DMatrix::from_fn(m, m, |r, c| eval.hessian[(self.free[r], self.free[c])]);
        (g, h)
    }

    /// Newton direction, shifting the Hessian when it is not positive definite.
    fn newton_direction(g: &DVector<f64>, h: DMatrix<f64>) -> DVector<f64> {
        if let Some(ch) = h.clone().cholesky() {
            return -ch.solve(g);
        }
        let eig = h.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        let scale = h.diagonal().abs().max().max(1e-12);
        let mut shifted = h;
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += -min + 1e-6 * scale;
        }
        match shifted.clone().cholesky() {
            Some(ch) => -ch.solve(g),
            None => -g / scale,
        }
    }

    /// Static equilibrium for control `u`, starting from `x_init` or the rest
    /// shape. If Newton stalls, the contraction is ramped up from the rest
    /// shape in progressively finer increments.
    pub fn static_equilibrium(&self, u: &[f64], x_init: Option<&DVector<f64>>) -> Result<Equilibrium> {
        self.validate_control(u)?;
        let first = match self.newton(u, x_init) {
            Ok(eq) => return Ok(eq),
            Err(e @ Error::NotConverged { .. }) => e,
            Err(e) => return Err(e),
        };
        let mut total = 0;
        for n in [4usize, 16] {
            let mut x = self.rest.clone();
            let mut ok = true;
            for k in 1..=n {
                let uk: Vec<f64> = u.iter().map(|v| v * k as f64 / n as f64).collect();
                match self.newton(&uk, Some(&x)) {
                    Ok(eq) => {
                        total += eq.iterations;
                        x = eq.x;
                    }
                    Err(Error::NotConverged { .. }) => {
                        ok = false;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if ok {
                let mut eq = self.newton(u, Some(&x))?;
                eq.iterations += total;
                return Ok(eq);
            }
        }
        Err(first)
    }

    fn newton(&self, u: &[f64], x_init: Option<&DVector<f64>>) -> Result<Equilibrium> {
        let mut x = match x_init {
            Some(x0) => {
                self.check_x(x0)?;
                let mut x = x0.clone();
                for &i in &self.mesh.fixed_nodes {
                    x[2 * i] = self.rest[2 * i];
                    x[2 * i + 1] = self.rest[2 * i + 1];
                }
                x
            }
            None => self.rest.clone(),
        };
        let mut eval = self.energy(&x, u)?;
        for iter in 0..=MAX_NEWTON_ITERATIONS {
            let (g, h) = self.reduce(&eval);
            let residual = g.amax();
            if residual < EQUILIBRIUM_TOL {
                return Ok(Equilibrium {
                    x,
                    iterations: iter,
                    residual,
                    inverted: eval.inverted,
                });
            }
            if iter == MAX_NEWTON_ITERATIONS {
                break;
            }
            let d = Self::newton_direction(&g, h);
            let slope = g.dot(&d);
            let e0 = eval.energy;
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let mut trial = x.clone();
                for (k, &i) in self.free.iter().enumerate() {
                    trial[i] += alpha * d[k];
                }
                let e1 = self.energy_value(&trial, u);
                if e1 <= e0 + 1e-4 * alpha * slope + 4.0 * f64::EPSILON * e0.abs() {
                    accepted = Some(trial);
                    break;
                }
                alpha *= 0.5;
            }
            let trial = match accepted {
                Some(t) => t,
                None => {
                    // Energy differences are below roundoff; fall back to the
                    // residual as merit.
                    let mut t = x.clone();
                    for (k, &i) in self.free.iter().enumerate() {
                        t[i] += d[k];
                    }
                    let te = self.energy(&t, u)?;
                    if self.reduce(&te).0.amax() >= residual {
                        return Err(Error::NotConverged {
                            iterations: iter,
                            residual,
                        });
                    }
                    t
                }
            };
            x = trial;
            eval = self.energy(&x, u)?;
        }
        let residual = self.reduce(&eval).0.amax();
        Err(Error::NotConverged {
            iterations: MAX_NEWTON_ITERATIONS,
            residual,
        })
    }

    /// `dx/du` at an equilibrium; rows of fixed coordinates are zero.
    pub fn sensitivity(&self, u: &[f64], x_star: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.validate_control(u)?;
        let eval = self.energy(x_star, u)?;
        let (_, h) = self.reduce(&eval);
        let m = self.free.len();
        let nc = self.cables.len();
        let mut b = DMatrix::zeros(m, nc);
        for c in 0..nc {
            if self.stretch(x_star, u, c) > 0.0 {
                let gl = self.length_gradient(x_star, c);
                for (r, &i) in self.free.iter().enumerate() {
                    b[(r, c)] = self.cables[c].stiffness * gl[i];
                }
            }
        }
        let sol = match h.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => {
                let eig = h.clone().symmetric_eigen();
                let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
                let (imin, &lmin) = eig
                    .eigenvalues
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .expect("non-empty");
                if lmin.abs() <= 1e-12 * scale {
                    let v = eig.eigenvectors.column(imin);
                    let k = v.iamax();
                    return Err(Error::SingularHessian { dof: self.free[k] });
                }
                h.lu()
                    .solve(&b)
                    .ok_or_else(|| Error::Singular("equilibrium Hessian".into()))?
            }
        };
        let mut out = DMatrix::zeros(self.n_dof(), nc);
        for (r, &i) in self.free.iter().enumerate() {
            for c in 0..nc {
                out[(i, c)] = -sol[(r, c)];
            }
        }
        Ok(out)
    }
}

/// Smooth one-sided penalty and its derivative.
pub fn fov_penalty(z: f64, eps: f64) -> (f64, f64) {
    if z > eps {
        (z * z - eps * z + eps * eps / 3.0, 2.0 * z - eps)
    } else if z > 0.0 {
        (z * z * z / (3.0 * eps), z * z / eps)
    } else {
        (0.0, 0.0)
    }
}

pub fn anchor_point(mesh: &FingerMesh, x: &DVector<f64>, a: &BarycentricAnchor) -> Vector3<f64> {
    let t = mesh.triangles[a.element];
    let mut p = Vector3::zeros();
    for (k, &i) in t.iter().enumerate() {
        p.x += a.weights[k] * x[2 * i];
        p.y += a.weights[k] * x[2 * i + 1];
    }
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveEval {
    pub grasp: f64,
    pub fov: f64,
    /// Gradient of `grasp + fov` with respect to all coordinates.
    pub gradient: DVector<f64>,
}

impl ObjectiveEval {
    pub fn total(&self) -> f64 {
        self.grasp + self.fov
    }
}

/// Negated squared grasp area plus field-of-view penetration penalty.
pub fn objectives(mesh: &FingerMesh, x: &DVector<f64>, cfg: &GraspObjectiveConfig) -> ObjectiveEval {
    let mut gradient = DVector::zeros(x.len());
    let y1 = anchor_point(mesh, x, &cfg.anchors[0]);
    let y2 = anchor_point(mesh, x, &cfg.anchors[1]);
    let a = cfg.target - y1;
    let b = cfg.target - y2;
    let c = a.cross(&b);
    let grasp = -cfg.grasp_weight * c.norm_squared();
    let dy1 = 2.0 * cfg.grasp_weight * b.cross(&c);
    let dy2 = 2.0 * cfg.grasp_weight * c.cross(&a);
    for (anchor, dy) in cfg.anchors.iter().zip([dy1, dy2]) {
        let t = mesh.triangles[anchor.element];
        for (k, &i) in t.iter().enumerate() {
            gradient[2 * i] += anchor.weights[k] * dy.x;
            gradient[2 * i + 1] += anchor.weights[k] * dy.y;
        }
    }

    let mut fov = 0.0;
    for plane in &cfg.fov_planes {
        for i in 0..mesh.nodes.len() {
            let xi = Vector3::new(x[2 * i], x[2 * i + 1], 0.0);
            let z = (plane.point - xi).dot(&plane.normal);
            let (f, df) = fov_penalty(z, cfg.epsilon);
            fov += cfg.fov_weight * f;
            gradient[2 * i] -= cfg.fov_weight * df * plane.normal.x;
            gradient[2 * i + 1] -= cfg.fov_weight * df * plane.normal.y;
        }
    }
    ObjectiveEval { grasp, fov, gradient }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Upper bounds on `u`; default the cable rest lengths.
    pub u_max: Option<Vec<f64>>,
}

impl Default for ControlOptions {
    fn default() -> Self {
        ControlOptions {
            max_iterations: 500,
            tolerance: 1e-6,
            u_max: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControlResult {
    pub u: Vec<f64>,
    pub x: DVector<f64>,
    pub objective: f64,
    pub grasp: f64,
    pub fov: f64,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
}

/// Objective value and its gradient with respect to `u`, chained through the
/// equilibrium sensitivity.
pub fn objective_and_gradient(
    model: &FemModel,
    cfg: &GraspObjectiveConfig,
    u: &[f64],
    warm: Option<&DVector<f64>>,
) -> Result<(ObjectiveEval, DVector<f64>, DVector<f64>)> {
    let eq = model.static_equilibrium(u, warm)?;
    let obj = objectives(model.mesh(), &eq.x, cfg);
    let s = model.sensitivity(u, &eq.x)?;
    let grad_u = s.transpose() * &obj.gradient;
    Ok((obj, grad_u, eq.x))
}

pub fn optimize_control(
    model: &FemModel,
    cfg: &GraspObjectiveConfig,
    u_init: &[f64],
    opts: &ControlOptions,
) -> Result<ControlResult> {
    cfg.validate(model.mesh())?;
    model.validate_control(u_init)?;
    let u_max = match &opts.u_max {
        Some(m) => {
            if m.len() != u_init.len() {
                return Err(Error::config("options.u_max", "length must match the number of cables"));
            }
            for (c, (&v, &l)) in m.iter().zip(model.rest_lengths()).enumerate() {
                if !(v >= 0.0 && v <= l) {
                    return Err(Error::config(
                        format!("options.u_max[{c}]"),
                        format!("must lie in [0, {l}]"),
                    ));
                }
            }
            m.clone()
        }
        None => model.rest_lengths().to_vec(),
    };
    if u_init.iter().zip(&u_max).any(|(u, m)| u > m) {
        return Err(Error::config("u_init", "exceeds u_max"));
    }
    let project =
        |v: &DVector<f64>| DVector::from_iterator(v.len(), v.iter().zip(&u_max).map(|(x, m)| x.clamp(0.0, *m)));

    let mut u = DVector::from_column_slice(u_init);
    let (mut obj, mut grad, mut x) = objective_and_gradient(model, cfg, u.as_slice(), None)?;
    let mut history = vec![obj.total()];
    let mut alpha = 1.0;
    let mut converged = false;
    let mut line_search_failed = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        let pg = &u - project(&(&u - &grad));
        if pg.norm() < opts.tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let f0 = obj.total();
        let mut step = None;
        for _ in 0..60 {
            let trial = project(&(&u - alpha * &grad));
            let decrease = grad.dot(&(&u - &trial));
            if decrease <= 0.0 {
                alpha *= 0.5;
                continue;
            }
            let (o, g, xt) = objective_and_gradient(model, cfg, trial.as_slice(), Some(&x))?;
            if o.total() <= f0 - 1e-4 * decrease {
                step = Some((trial, o, g, xt));
                break;
            }
            alpha *= 0.5;
        }
        match step {
            Some((un, o, g, xt)) => {
                u = un;
                obj = o;
                grad = g;
                x = xt;
                history.push(obj.total());
                alpha = (alpha * 2.0).min(1e12);
            }
            None => {
                line_search_failed = true;
                break;
            }
        }
    }

    Ok(ControlResult {
        u: u.iter().copied().collect(),
        x,
        objective: obj.total(),
        grasp: obj.grasp,
        fov: obj.fov,
        history,
        iterations,
        converged,
        line_search_failed,
    })
}

/// Two mirrored arc fingers with one opening cable each, and a grasp
/// objective over their fingertips and a target point at the palm.
pub fn finger_pair(
    spec: &ArcSpec,
    stiffness: f64,
    target: Vector3<f64>,
    grasp_weight: f64,
) -> Result<(FemModel, GraspObjectiveConfig)> {
    let right = FingerMesh::arc(spec)?;
    let left_spec = spec.mirrored(0.0);
    let left = FingerMesh::arc(&left_spec)?;
    let (mesh, off) = right.merge(&left)?;
    let cables = vec![
        Cable::along_arc(spec, spec.outer_layer(), stiffness),
        Cable::along_arc(&left_spec, left_spec.outer_layer(), stiffness).offset(off),
    ];
    let tip = |s: &ArcSpec, off: usize| {
        let (n0, n1) = (s.node(s.segments, 0) + off, s.node(s.segments, 1) + off);
        mesh.edge_midpoint_anchor(n0, n1)
            .ok_or_else(|| Error::config("mesh", "tip edge not found"))
    };
    let anchors = [tip(spec, 0)?, tip(&left_spec, off)?];
    let cfg = GraspObjectiveConfig {
        target,
        anchors,
        fov_planes: Vec::new(),
        epsilon: 0.002,
        grasp_weight,
        fov_weight: 0.0,
    };
    Ok((FemModel::new(mesh, cables)?, cfg))
}
