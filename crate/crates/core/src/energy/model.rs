use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Condition, ConvexPrimitive, EnergyError};
use crate::diffengine::{DiffError, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub primitive: ConvexPrimitive,
}

impl LayerSpec {
    pub fn new(width: usize, primitive: ConvexPrimitive) -> Self {
        LayerSpec { width, primitive }
    }
}

/// Pre-activations `x_h` and activations `Ψ_h(x_h)` of every layer for one state.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub x: Vec<Array1<f64>>,
    pub psi: Vec<Array1<f64>>,
}

/// Batched layer values, one state per row.
#[derive(Clone, Debug)]
pub struct LayerRows {
    pub pre: Array2<f64>,
    pub act: Array2<f64>,
}

/// Layered energy model with a dynamic visible layer and feedforward hidden layers.
///
/// `weights[h]` is the block `W_{h,h+1}` of shape `N_h x N_{h+1}` (0-based
/// layers). Hidden states are propagated in row form, `x_{h+1} = Ψ_h W + b_{h+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridEbm {
    layers: Vec<LayerSpec>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    hidden_bias: bool,
}

/// Parameter leaves of a model recorded on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub weights: Vec<Var>,
    /// `None` for hidden biases of models without hidden bias.
    pub biases: Vec<Option<Var>>,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        self.weights.iter().copied().chain(self.biases.iter().flatten().copied()).collect()
    }
}

impl HybridEbm {
    pub fn new(
        layers: Vec<LayerSpec>,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        hidden_bias: bool,
    ) -> Result<Self, EnergyError> {
        if layers.is_empty() {
            return Err(EnergyError::Shape("at least the visible layer is required".into()));
        }
        for (h, l) in layers.iter().enumerate() {
            if l.width == 0 {
                return Err(EnergyError::Shape(format!("layer {} has width 0", h + 1)));
            }
            l.primitive.validate()?;
        }
        if weights.len() + 1 != layers.len() || biases.len() != layers.len() {
            return Err(EnergyError::Shape(format!(
                "{} layers need {} weight blocks and {} biases, got {} and {}",
                layers.len(),
                layers.len() - 1,
                layers.len(),
                weights.len(),
                biases.len()
            )));
        }
        for (h, w) in weights.iter().enumerate() {
            let want = (layers[h].width, layers[h + 1].width);
            if w.dim() != want {
                return Err(EnergyError::Shape(format!("W{}{} is {:?}, expected {:?}", h + 1, h + 2, w.dim(), want)));
            }
        }
        for (h, b) in biases.iter().enumerate() {
            if b.len() != layers[h].width {
                return Err(EnergyError::Shape(format!("b{} has length {}, expected {}", h + 1, b.len(), layers[h].width)));
            }
            if !hidden_bias && h > 0 && b.iter().any(|&v| v != 0.0) {
                return Err(EnergyError::Shape(format!("b{} must be zero without hidden bias", h + 1)));
            }
        }
        Ok(HybridEbm { layers, weights, biases, hidden_bias })
    }

    /// All weights and biases zero.
    pub fn zeros(layers: Vec<LayerSpec>, hidden_bias: bool) -> Result<Self, EnergyError> {
        let weights = layers.windows(2).map(|p| Array2::zeros((p[0].width, p[1].width))).collect();
        let biases = layers.iter().map(|l| Array1::zeros(l.width)).collect();
        Self::new(layers, weights, biases, hidden_bias)
    }

    /// Weight entries uniform in `±1/√fan_in`, biases zero.
    pub fn random<R: Rng>(layers: Vec<LayerSpec>, hidden_bias: bool, rng: &mut R) -> Result<Self, EnergyError> {
        let mut m = Self::zeros(layers, hidden_bias)?;
        for w in m.weights.iter_mut() {
            let a = 1.0 / (w.nrows() as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-a..a));
        }
        Ok(m)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }
    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }
    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }
    pub fn hidden_bias(&self) -> bool {
        self.hidden_bias
    }
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
    pub fn visible_width(&self) -> usize {
        self.layers[0].width
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn visible_bias_mut(&mut self) -> &mut Array1<f64> {
        &mut self.biases[0]
    }

    /// Hidden bias of layer `h` (0-based, `h ≥ 1`); `None` without hidden bias.
    pub fn hidden_bias_mut(&mut self, h: usize) -> Option<&mut Array1<f64>> {
        if self.hidden_bias && h > 0 {
            self.biases.get_mut(h)
        } else {
            None
        }
    }

    /// Names and values of the trainable blocks, in a fixed order.
    pub fn param_blocks(&self) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        for (h, w) in self.weights.iter().enumerate() {
            out.push((format!("W{}{}", h + 1, h + 2), w.clone()));
        }
        for (h, b) in self.biases.iter().enumerate() {
            if h == 0 || self.hidden_bias {
                out.push((format!("b{}", h + 1), b.clone().insert_axis(Axis(0))));
            }
        }
        out
    }

    /// Inverse of [`HybridEbm::param_blocks`].
    pub fn set_param_blocks(&mut self, blocks: &[Array2<f64>]) -> Result<(), EnergyError> {
        let expected = self.param_blocks();
        if blocks.len() != expected.len() {
            return Err(EnergyError::Shape(format!("expected {} parameter blocks, got {}", expected.len(), blocks.len())));
        }
        for ((name, e), b) in expected.iter().zip(blocks) {
            if e.dim() != b.dim() {
                return Err(EnergyError::Shape(format!("{name} is {:?}, got {:?}", e.dim(), b.dim())));
            }
        }
        let nw = self.weights.len();
        for (w, b) in self.weights.iter_mut().zip(blocks) {
            w.assign(b);
        }
        let mut k = nw;
        for h in 0..self.biases.len() {
            if h == 0 || self.hidden_bias {
                self.biases[h].assign(&blocks[k].row(0));
                k += 1;
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.param_blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// First violated structural condition, if any.
    pub fn check_conditions(&self) -> Result<(), EnergyError> {
        if self.layers[0].primitive != ConvexPrimitive::Quadratic {
            return Err(EnergyError::Condition(Condition::LinearVisible));
        }
        if self.layers.len() > 1 && !self.layers[1].primitive.bounded_activation() {
            return Err(EnergyError::Condition(Condition::BoundedFirstHidden));
        }
        Ok(())
    }

    fn check_rows(&self, x: &Array2<f64>) -> Result<(), EnergyError> {
        if x.ncols() != self.visible_width() {
            return Err(EnergyError::Shape(format!(
                "state has width {}, model expects {}",
                x.ncols(),
                self.visible_width()
            )));
        }
        Ok(())
    }

    /// Layer values for a batch of visible states.
    pub fn forward_rows(&self, x: &Array2<f64>) -> Result<Vec<LayerRows>, EnergyError> {
        self.check_rows(x)?;
        let mut out = Vec::with_capacity(self.layers.len());
        let act = self.layers[0].primitive.activation_rows(x);
        out.push(LayerRows { pre: x.clone(), act });
        for h in 1..self.layers.len() {
            let mut pre = out[h - 1].act.dot(&self.weights[h - 1]);
            if self.hidden_bias {
                pre += &self.biases[h];
            }
            let act = self.layers[h].primitive.activation_rows(&pre);
            out.push(LayerRows { pre, act });
        }
        Ok(out)
    }

    pub fn hidden_forward(&self, x1: &[f64]) -> Result<HiddenStates, EnergyError> {
        let rows = self.forward_rows(&row_matrix(x1))?;
        Ok(HiddenStates {
            x: rows.iter().map(|r| r.pre.row(0).to_owned()).collect(),
            psi: rows.iter().map(|r| r.act.row(0).to_owned()).collect(),
        })
    }

    /// Interaction part `−Σ Ψ_hᵀ W_{h,h+1} Ψ_{h+1}` and Legendre part
    /// `Σ (x_h − b_h)ᵀ Ψ_h − F_h(x_h)` of the energy, per row.
    pub fn energy_parts_rows(&self, x: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>), EnergyError> {
        let rows = self.forward_rows(x)?;
        let mut quad = Array1::zeros(x.nrows());
        let mut ham = Array1::zeros(x.nrows());
        for (h, r) in rows.iter().enumerate() {
            let shifted = &r.pre - &self.biases[h];
            let legendre = (&shifted * &r.act).sum_axis(Axis(1)) - self.layers[h].primitive.value_rows(&r.pre);
            if legendre.iter().any(|v| !v.is_finite()) {
                return Err(EnergyError::NonFinite { layer: h + 1, what: "Legendre term" });
            }
            ham += &legendre;
            if h + 1 < rows.len() {
                quad -= &(&r.act.dot(&self.weights[h]) * &rows[h + 1].act).sum_axis(Axis(1));
            }
        }
        Ok((quad, ham))
    }

    /// `E = −Σ Ψ_hᵀ W_{h,h+1} Ψ_{h+1} + Σ (x_h − b_h)ᵀ Ψ_h − Σ F_h(x_h)` per row.
    pub fn energy_rows(&self, x: &Array2<f64>) -> Result<Array1<f64>, EnergyError> {
        let (quad, ham) = self.energy_parts_rows(x)?;
        let e = quad + ham;
        if e.iter().any(|v| !v.is_finite()) {
            return Err(EnergyError::NonFinite { layer: 0, what: "energy" });
        }
        Ok(e)
    }

    pub fn energy(&self, x1: &[f64]) -> Result<f64, EnergyError> {
        if let Some(i) = x1.iter().position(|v| !v.is_finite()) {
            return Err(EnergyError::NonFiniteInput { index: i });
        }
        Ok(self.energy_rows(&row_matrix(x1))?[0])
    }

    /// The reduced visible field `−x + b₁ + W₁₂ c₂`, where `c_L = Ψ_L` and
    /// `c_h = Ψ_h + DΨ_h W_{h,h+1} c_{h+1}`.
    pub fn reduced_field_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>, EnergyError> {
        self.check_conditions()?;
        let rows = self.forward_rows(x)?;
        let mut out = &self.biases[0] - x;
        if let Some(c) = self.back_chain(&rows) {
            out += &c.dot(&self.weights[0].t());
        }
        Ok(out)
    }

    fn back_chain(&self, rows: &[LayerRows]) -> Option<Array2<f64>> {
        let l = rows.len();
        if l < 2 {
            return None;
        }
        let mut c = rows[l - 1].act.clone();
        for h in (1..l - 1).rev() {
            let u = c.dot(&self.weights[h].t());
            let p = self.layers[h].primitive;
            c = &rows[h].act + &p.jvp_rows(&rows[h].pre, &rows[h].act, &u);
        }
        Some(c)
    }

    /// Per-layer summands of the reduced field (without `−x`), the first
    /// including the visible bias. They sum to `field + x`.
    pub fn field_summands_rows(&self, x: &Array2<f64>) -> Result<Vec<Array2<f64>>, EnergyError> {
        self.check_conditions()?;
        let rows = self.forward_rows(x)?;
        let l = rows.len();
        let mut first = Array2::zeros(x.dim()) + &self.biases[0];
        if l < 2 {
            return Ok(vec![first]);
        }
        first += &rows[1].act.dot(&self.weights[0].t());
        let mut out = vec![first];
        for k in 1..l - 1 {
            let mut v = rows[k + 1].act.dot(&self.weights[k].t());
            for j in (1..=k).rev() {
                let p = self.layers[j].primitive;
                v = p.jvp_rows(&rows[j].pre, &rows[j].act, &v).dot(&self.weights[j - 1].t());
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Record every trainable block as a tape input.
    pub fn record_params(&self, t: &mut Tape) -> ModelVars {
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(h, w)| t.input(format!("W{}{}", h + 1, h + 2), w.clone()))
            .collect();
        let biases = self
            .biases
            .iter()
            .enumerate()
            .map(|(h, b)| {
                (h == 0 || self.hidden_bias)
                    .then(|| t.input(format!("b{}", h + 1), b.clone().insert_axis(Axis(0))))
            })
            .collect();
        ModelVars { weights, biases }
    }

    fn record_forward(&self, t: &mut Tape, p: &ModelVars, x: Var) -> Result<Vec<(Var, Var)>, DiffError> {
        let mut out = Vec::with_capacity(self.layers.len());
        let a0 = self.layers[0].primitive.record_activation(t, x);
        out.push((x, a0));
        for h in 1..self.layers.len() {
            let mut pre = t.matmul(out[h - 1].1, p.weights[h - 1])?;
            if let Some(b) = p.biases[h] {
                pre = t.add(pre, b)?;
            }
            let act = self.layers[h].primitive.record_activation(t, pre);
            out.push((pre, act));
        }
        Ok(out)
    }

    /// Row energies (`B x 1`) on a tape; structure matches [`HybridEbm::energy_rows`].
    pub fn record_energy(&self, t: &mut Tape, p: &ModelVars, x: Var) -> Result<Var, DiffError> {
        let rows = self.record_forward(t, p, x)?;
        let mut e: Option<Var> = None;
        for (h, &(pre, act)) in rows.iter().enumerate() {
            let shifted = match p.biases[h] {
                Some(b) => t.sub(pre, b)?,
                None => pre,
            };
            let lin = t.row_dot(shifted, act)?;
            let f = self.layers[h].primitive.record_value(t, pre);
            let mut term = t.sub(lin, f)?;
            if h + 1 < rows.len() {
                let wa = t.matmul(act, p.weights[h])?;
                let inter = t.row_dot(wa, rows[h + 1].1)?;
                term = t.sub(term, inter)?;
            }
            e = Some(match e {
                Some(acc) => t.add(acc, term)?,
                None => term,
            });
        }
        Ok(e.expect("at least one layer"))
    }

    /// Reduced field on a tape (`B x N₁`); requires the structural conditions.
    pub fn record_reduced_field(&self, t: &mut Tape, p: &ModelVars, x: Var) -> Result<Var, EnergyError> {
        self.check_conditions()?;
        let rows = self.record_forward(t, p, x)?;
        let l = rows.len();
        let mut f = t.neg(x);
        if let Some(b) = p.biases[0] {
            f = t.add(f, b)?;
        }
        if l >= 2 {
            let mut c = rows[l - 1].1;
            for h in (1..l - 1).rev() {
                let u = t.matmul_t(c, p.weights[h], false, true)?;
                let (pre, act) = rows[h];
                let j = self.layers[h].primitive.record_jvp(t, pre, act, u)?;
                c = t.add(act, j)?;
            }
            let back = t.matmul_t(c, p.weights[0], false, true)?;
            f = t.add(f, back)?;
        }
        Ok(f)
    }

    /// `−∇E` per row through the tape.
    pub fn energy_gradient_field_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>, EnergyError> {
        self.check_rows(x)?;
        let mut t = Tape::new();
        let p = self.record_params(&mut t);
        let xv = t.input("x", x.clone());
        let e = self.record_energy(&mut t, &p, xv)?;
        let s = t.sum(e);
        let g = t.gradients(s, &[xv])?.remove(0);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(EnergyError::NonFinite { layer: 0, what: "energy gradient" });
        }
        Ok(-g)
    }

    pub fn to_doc(&self) -> ModelDoc {
        ModelDoc {
            layers: self.layers.iter().map(LayerDoc::from_spec).collect(),
            weights: self.weights.iter().map(MatrixDoc::from_array).collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
            hidden_bias: self.hidden_bias,
        }
    }

    pub fn from_doc(doc: &ModelDoc) -> Result<Self, EnergyError> {
        let layers = doc.layers.iter().map(LayerDoc::to_spec).collect::<Result<Vec<_>, _>>()?;
        let weights = doc.weights.iter().map(MatrixDoc::to_array).collect::<Result<Vec<_>, _>>()?;
        let biases = doc.biases.iter().map(|b| Array1::from_vec(b.clone())).collect();
        Self::new(layers, weights, biases, doc.hidden_bias)
    }
}

pub(crate) fn row_matrix(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}

/// Serialized model: layers, weight blocks with shape headers, biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub layers: Vec<LayerDoc>,
    pub weights: Vec<MatrixDoc>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default = "default_true")]
    pub hidden_bias: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub width: usize,
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl LayerDoc {
    pub fn from_spec(l: &LayerSpec) -> Self {
        let mut params = BTreeMap::new();
        match l.primitive {
            ConvexPrimitive::LogSumExp { beta } => {
                params.insert("beta".to_string(), beta);
            }
            ConvexPrimitive::PowerNorm { q } => {
                params.insert("q".to_string(), q);
            }
            _ => {}
        }
        LayerDoc { width: l.width, kind: l.primitive.name().to_string(), params }
    }

    pub fn to_spec(&self) -> Result<LayerSpec, EnergyError> {
        let get = |k: &str| {
            self.params.get(k).copied().ok_or_else(|| EnergyError::Document(format!("layer `{}` needs `{k}`", self.kind)))
        };
        let p = match self.kind.as_str() {
            "quadratic" => ConvexPrimitive::Quadratic,
            "log_sum_exp" | "softmax" => ConvexPrimitive::LogSumExp { beta: self.params.get("beta").copied().unwrap_or(1.0) },
            "power_norm" => ConvexPrimitive::PowerNorm { q: get("q")? },
            "log_cosh" => ConvexPrimitive::LogCosh,
            other => return Err(EnergyError::Document(format!("unknown layer kind `{other}`"))),
        };
        p.validate()?;
        Ok(LayerSpec::new(self.width, p))
    }
}

/// Row-major matrix with its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixDoc {
    pub fn from_array(a: &Array2<f64>) -> Self {
        MatrixDoc { rows: a.nrows(), cols: a.ncols(), data: a.iter().copied().collect() }
    }

    pub fn to_array(&self) -> Result<Array2<f64>, EnergyError> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|_| EnergyError::Document(format!("matrix data has {} entries, header says {}x{}", self.data.len(), self.rows, self.cols)))
    }
}
