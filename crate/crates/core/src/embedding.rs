//! Key and query position embeddings.
//!
//! Keys embed the frustum points behind each pixel, queries embed 3D
//! reference points. In camera-view mode both live in the frame of the
//! camera being attended: key embeddings read intrinsics only (through the
//! frustum) and query embeddings read extrinsics only. All coordinates are
//! divided by a fixed scale before entering a perceptron.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Extrinsics;
use crate::tensor::{Activation, Mlp2, ParamStore, Result, Tape, Tensor, Var};

/// Coordinate frame the position embeddings are formed in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    /// Global (ego) frame: keys are lifted through the inverse extrinsics and
    /// queries are embedded where they stand.
    Global,
    /// Each camera's own frame.
    #[default]
    Camera,
}

/// Key-side perceptrons: `φ` over flattened frustum points and the
/// feature-guidance perceptron `ξ`.
#[derive(Clone, Copy, Debug)]
pub struct KeyPe {
    pub phi: Mlp2,
    pub xi: Mlp2,
    pub scale: f64,
}

impl KeyPe {
    pub fn new(
        store: &mut ParamStore,
        depth_bins: usize,
        width: usize,
        scale: f64,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            phi: Mlp2::new(store, "key_pe.phi", (3 * depth_bins, width, width), activation, rng),
            xi: Mlp2::new(store, "key_pe.xi", (width, width, width), activation, rng),
            scale,
        }
    }

    /// `p = φ(c')` for each pixel of `coords: [I, 3·D]`.
    pub fn key_pe(&self, tape: &mut Tape, coords: Var) -> Result<Var> {
        let c = tape.scale(coords, 1.0 / self.scale);
        self.phi.forward(tape, c)
    }

    /// `p = φ(c') ⊙ ξ(x)` with `features: [I, C]`.
    pub fn key_fpe(&self, tape: &mut Tape, coords: Var, features: Var) -> Result<Var> {
        let p = self.key_pe(tape, coords)?;
        let guide = self.xi.forward(tape, features)?;
        tape.mul(p, guide)
    }
}

/// Query-side perceptrons: `ψ` for reference points, `η_g`/`η_l` for
/// embedding-guided modulation and `ρ` for the self-attention positional term.
#[derive(Clone, Copy, Debug)]
pub struct QueryPe {
    pub psi: Mlp2,
    pub eta_g: Mlp2,
    pub eta_l: Mlp2,
    pub rho_self: Mlp2,
    pub scale: f64,
}

impl QueryPe {
    pub fn new(store: &mut ParamStore, width: usize, scale: f64, activation: Activation, rng: &mut impl Rng) -> Self {
        Self {
            psi: Mlp2::new(store, "query_pe.psi", (3, width, width), activation, rng),
            eta_g: Mlp2::new(store, "query_pe.eta_g", (12, width, width), activation, rng),
            eta_l: Mlp2::new(store, "query_pe.eta_l", (width, width, width), activation, rng),
            rho_self: Mlp2::new(store, "query_pe.rho_self", (3, width, width), activation, rng),
            scale,
        }
    }

    /// Reference points `[M, 3]` (meters, global) expressed in the frame of
    /// `e` and scaled for embedding: `(R·r + t) / scale`.
    pub fn camera_points(&self, tape: &mut Tape, points: Var, e: &Extrinsics) -> Result<Var> {
        let rt = Tensor::new([3, 3], e.rotation().as_slice().to_vec()).expect("3x3");
        // nalgebra is column-major, so the slice above is already Rᵀ row-major.
        let rt = tape.leaf(rt);
        let t = tape.leaf(Tensor::new([3], e.translation().as_slice().to_vec()).expect("3"));
        let p = tape.matmul(points, rt)?;
        let p = tape.add_row(p, t)?;
        Ok(tape.scale(p, 1.0 / self.scale))
    }

    /// `g = ψ(r̄)` for camera-frame points `[M, 3]` from [`Self::camera_points`].
    pub fn query_pe(&self, tape: &mut Tape, cam_points: Var) -> Result<Var> {
        self.psi.forward(tape, cam_points)
    }

    /// `g = ψ(r̄) ⊙ η_l(o ⊙ η_g(vec T))` with decoder embeddings `o: [M, C]`.
    ///
    /// `vec T` is the top three rows of the extrinsic matrix with the
    /// translation column divided by the embedding scale.
    pub fn query_fpe(&self, tape: &mut Tape, cam_points: Var, embeddings: Var, e: &Extrinsics) -> Result<Var> {
        let g = self.query_pe(tape, cam_points)?;
        let ext = self.extrinsic_code(tape, e);
        let modulation = self.eta_g.forward(tape, ext)?;
        let guided = tape.mul_row(embeddings, modulation)?;
        let eta = self.eta_l.forward(tape, guided)?;
        tape.mul(g, eta)
    }

    fn extrinsic_code(&self, tape: &mut Tape, e: &Extrinsics) -> Var {
        let mut rows = e.top_rows();
        for k in [3, 7, 11] {
            rows[k] /= self.scale;
        }
        tape.leaf(Tensor::new([1, 12], rows.to_vec()).expect("12"))
    }

    /// Positional term for self-attention from global points `[M, 3]` (meters).
    pub fn self_pos_embedding(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        let p = tape.scale(points, 1.0 / self.scale);
        self.rho_self.forward(tape, p)
    }
}
