use super::{Dense, GradVector, Layout, ModelParams, Scope, Tower};
use crate::data::{Example, Features};
use crate::error::{Error, Result};

/// Logistic function, split by sign so neither branch overflows.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross entropy on a logit: `t * softplus(-z) + (1 - t) * softplus(z)`.
pub fn bce_loss(logit: f64, target: f64) -> f64 {
    target * softplus(-logit) + (1.0 - target) * softplus(logit)
}

/// Derivative of [`bce_loss`] with respect to the logit.
pub fn bce_loss_grad(logit: f64, target: f64) -> f64 {
    sigmoid(logit) - target
}

/// Gradient of one example, split into the dense-layer block and the touched
/// embedding rows.
#[derive(Debug, Clone, Default)]
pub(crate) struct ExampleGrad {
    /// Coordinates `[dense_start, len)` of the flat parameter vector.
    pub dense: Vec<f64>,
    /// `(flat offset, length, start in row_vals)` per touched embedding row.
    pub rows: Vec<(usize, usize, usize)>,
    pub row_vals: Vec<f64>,
}

impl ExampleGrad {
    pub fn sq_norm(&self) -> f64 {
        self.dense.iter().map(|v| v * v).sum::<f64>()
            + self.row_vals.iter().map(|v| v * v).sum::<f64>()
    }

    /// `acc += scale * self`, where `acc` is a full-length parameter vector.
    pub fn add_scaled_to(&self, dense_start: usize, scale: f64, acc: &mut [f64]) {
        for (a, g) in acc[dense_start..].iter_mut().zip(&self.dense) {
            *a += scale * g;
        }
        for &(offset, len, start) in &self.rows {
            for (a, g) in acc[offset..offset + len]
                .iter_mut()
                .zip(&self.row_vals[start..start + len])
            {
                *a += scale * g;
            }
        }
    }

    pub fn to_full(&self, len: usize, dense_start: usize) -> Vec<f64> {
        let mut full = vec![0.0; len];
        self.add_scaled_to(dense_start, 1.0, &mut full);
        full
    }
}

/// Reusable buffers for forward and backward passes.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    ns: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    common: Vec<Vec<f64>>,
    ns_cat: Vec<u32>,
    s_cat: Vec<u32>,
    used_sensitive: bool,
    pub(crate) grad: ExampleGrad,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs the full model (`sensitive = Some`) or the truncated model
    /// (`sensitive = None`) and returns the logit.
    pub fn forward(
        &mut self,
        params: &ModelParams,
        nonsensitive: &Features,
        sensitive: Option<&Features>,
    ) -> Result<f64> {
        let layout = params.layout();
        let w = params.values();
        tower_forward(&layout.nonsensitive, w, nonsensitive, &mut self.ns)?;
        self.ns_cat.clone_from(&nonsensitive.cat);
        let d_s = layout.d_sensitive();
        self.used_sensitive = sensitive.is_some();
        let s_out: Vec<f64> = match sensitive {
            Some(f) if d_s > 0 => {
                tower_forward(&layout.sensitive, w, f, &mut self.s)?;
                self.s_cat.clone_from(&f.cat);
                self.s.last().cloned().unwrap_or_default()
            }
            _ => vec![0.0; d_s],
        };
        let mut input = self.ns.last().cloned().unwrap_or_default();
        input.extend_from_slice(&s_out);
        self.common.resize_with(layout.common.len() + 1, Vec::new);
        self.common[0] = input;
        let last = layout.common.len() - 1;
        for (k, d) in layout.common.iter().enumerate() {
            let (head, tail) = self.common.split_at_mut(k + 1);
            dense_forward(d, w, &head[k], &mut tail[0], k < last)?;
        }
        Ok(self.common[last + 1][0])
    }

    /// Backpropagates `dloss_dlogit` through the most recent forward pass and
    /// leaves the result in `self.grad`. The sensitive tower receives no
    /// gradient when the forward pass was truncated.
    pub(crate) fn backward(&mut self, params: &ModelParams, dloss_dlogit: f64) -> Result<()> {
        let layout = params.layout();
        let w = params.values();
        let g = &mut self.grad;
        g.dense.clear();
        g.dense.resize(layout.len - layout.dense_start, 0.0);
        g.rows.clear();
        g.row_vals.clear();
        let base = layout.dense_start;

        // delta is d loss / d (layer output); the last common layer is linear
        let mut delta = vec![dloss_dlogit];
        let last = layout.common.len() - 1;
        for k in (0..layout.common.len()).rev() {
            let d = &layout.common[k];
            if k < last {
                relu_mask(&mut delta, &self.common[k + 1]);
            }
            delta = dense_backward(d, w, &self.common[k], &delta, &mut g.dense, base)?;
        }
        let d_ns = layout.d_nonsensitive();
        let (delta_ns, delta_s) = delta.split_at(d_ns);
        tower_backward(
            &layout.nonsensitive,
            w,
            &self.ns,
            &self.ns_cat,
            delta_ns,
            g,
            base,
        )?;
        if self.used_sensitive && layout.d_sensitive() > 0 {
            tower_backward(&layout.sensitive, w, &self.s, &self.s_cat, delta_s, g, base)?;
        }
        Ok(())
    }
}

fn relu_mask(delta: &mut [f64], out: &[f64]) {
    for (d, &o) in delta.iter_mut().zip(out) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

fn tower_input(tower: &Tower, w: &[f64], f: &Features, out: &mut Vec<f64>) {
    out.clear();
    for (e, &idx) in tower.embeddings.iter().zip(&f.cat) {
        out.extend_from_slice(&w[e.row(idx)]);
    }
    out.extend_from_slice(&f.num);
}

fn tower_forward(tower: &Tower, w: &[f64], f: &Features, acts: &mut Vec<Vec<f64>>) -> Result<()> {
    acts.resize_with(tower.layers.len() + 1, Vec::new);
    tower_input(tower, w, f, &mut acts[0]);
    for (k, d) in tower.layers.iter().enumerate() {
        let (head, tail) = acts.split_at_mut(k + 1);
        dense_forward(d, w, &head[k], &mut tail[0], true)?;
    }
    Ok(())
}

fn dense_forward(d: &Dense, w: &[f64], x: &[f64], out: &mut Vec<f64>, relu: bool) -> Result<()> {
    out.clear();
    let weights = &w[d.offset..d.bias_offset()];
    let bias = &w[d.bias_offset()..d.offset + d.len()];
    for (row, &b) in weights.chunks_exact(d.inputs).zip(bias) {
        let z = b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        if !z.is_finite() {
            return Err(Error::Numeric { layer: d.index });
        }
        out.push(if relu { z.max(0.0) } else { z });
    }
    Ok(())
}

/// Accumulates this layer's weight/bias gradient into `dense` and returns
/// d loss / d input.
fn dense_backward(
    d: &Dense,
    w: &[f64],
    x: &[f64],
    delta: &[f64],
    dense: &mut [f64],
    base: usize,
) -> Result<Vec<f64>> {
    let n_in = d.inputs;
    let weights = &w[d.offset..d.bias_offset()];
    let gw_start = d.offset - base;
    let gb_start = d.bias_offset() - base;
    let mut delta_in = vec![0.0; n_in];
    for (o, &dz) in delta.iter().enumerate() {
        if !dz.is_finite() {
            return Err(Error::Numeric { layer: d.index });
        }
        dense[gb_start + o] += dz;
        if dz == 0.0 {
            continue;
        }
        let row = &weights[o * n_in..(o + 1) * n_in];
        let grow = &mut dense[gw_start + o * n_in..gw_start + (o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += dz * x[i];
            delta_in[i] += row[i] * dz;
        }
    }
    Ok(delta_in)
}

fn tower_backward(
    tower: &Tower,
    w: &[f64],
    acts: &[Vec<f64>],
    cat: &[u32],
    delta_out: &[f64],
    g: &mut ExampleGrad,
    base: usize,
) -> Result<()> {
    let mut delta = delta_out.to_vec();
    for k in (0..tower.layers.len()).rev() {
        relu_mask(&mut delta, &acts[k + 1]);
        delta = dense_backward(&tower.layers[k], w, &acts[k], &delta, &mut g.dense, base)?;
    }
    // delta is now d loss / d tower input: embedding rows, then numerics
    let mut pos = 0;
    for (e, &idx) in tower.embeddings.iter().zip(cat) {
        let vals = &delta[pos..pos + e.dim];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: tower.layers.first().map_or(0, |l| l.index),
            });
        }
        g.rows.push((e.row(idx).start, e.dim, g.row_vals.len()));
        g.row_vals.extend_from_slice(vals);
        pos += e.dim;
    }
    Ok(())
}

/// Logit of the full model.
pub fn forward_full(params: &ModelParams, example: &Example) -> Result<f64> {
    Workspace::new().forward(params, &example.nonsensitive, Some(&example.sensitive))
}

/// Logit of the truncated model; the example's sensitive fields are not read.
pub fn forward_truncated(params: &ModelParams, example: &Example) -> Result<f64> {
    Workspace::new().forward(params, &example.nonsensitive, None)
}

/// Exact gradient of `bce_loss(forward(params, example), target)` over the
/// parameters in `scope`.
pub fn per_example_grad(
    params: &ModelParams,
    example: &Example,
    target: f64,
    scope: Scope,
) -> Result<GradVector> {
    let mut ws = Workspace::new();
    let sensitive = (scope == Scope::Full).then_some(&example.sensitive);
    let z = ws.forward(params, &example.nonsensitive, sensitive)?;
    ws.backward(params, bce_loss_grad(z, target))?;
    let layout: &Layout = params.layout();
    let full = ws.grad.to_full(layout.len, layout.dense_start);
    Ok(GradVector::from_full(layout, scope, &full))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{init_params, Layout, ModelParams};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent forward pass: unpacks each layer into an explicit matrix
    /// and evaluates `relu(W x + b)` with plain loops.
    fn oracle_logit(params: &ModelParams, ex: &Example, truncated: bool) -> f64 {
        let l = params.layout();
        let w = params.values();
        let matvec = |d: &Dense, x: &[f64], relu: bool| -> Vec<f64> {
            let mut m = vec![vec![0.0; d.inputs]; d.outputs];
            for (o, row) in m.iter_mut().enumerate() {
                for (i, v) in row.iter_mut().enumerate() {
                    *v = w[d.offset + o * d.inputs + i];
                }
            }
            (0..d.outputs)
                .map(|o| {
                    let mut z = w[d.bias_offset() + o];
                    for i in 0..d.inputs {
                        z += m[o][i] * x[i];
                    }
                    if relu {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect()
        };
        let tower = |t: &Tower, f: &Features| -> Vec<f64> {
            let mut x = Vec::new();
            for (e, &idx) in t.embeddings.iter().zip(&f.cat) {
                for j in 0..e.dim {
                    x.push(w[e.offset + idx as usize * e.dim + j]);
                }
            }
            x.extend(&f.num);
            for d in &t.layers {
                x = matvec(d, &x, true);
            }
            x
        };
        let mut x = tower(&l.nonsensitive, &ex.nonsensitive);
        if truncated {
            x.extend(std::iter::repeat_n(0.0, l.d_sensitive()));
        } else {
            x.extend(tower(&l.sensitive, &ex.sensitive));
        }
        let n = l.common.len();
        for (k, d) in l.common.iter().enumerate() {
            x = matvec(d, &x, k + 1 < n);
        }
        x[0]
    }

    fn setup(seed: u64) -> (ModelParams, ChaCha8Rng) {
        let layout = Layout::new(&schema(), &tiny_config(seed)).unwrap();
        (init_params(&layout), ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn forward_matches_matrix_oracle() {
        for seed in 0..10 {
            let (p, mut rng) = setup(seed);
            for _ in 0..10 {
                let ex = random_example(&mut rng);
                for truncated in [false, true] {
                    let got = if truncated {
                        forward_truncated(&p, &ex)
                    } else {
                        forward_full(&p, &ex)
                    }
                    .unwrap();
                    let want = oracle_logit(&p, &ex, truncated);
                    assert!(
                        (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                        "{got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_final_bias() {
        let (p, mut rng) = setup(1);
        let mut z = ModelParams::zeros(p.layout().clone());
        let last = p.layout().common.last().unwrap().bias_offset();
        z.values_mut()[last] = 0.37;
        let ex = random_example(&mut rng);
        assert_eq!(forward_full(&z, &ex).unwrap(), 0.37);
        assert_eq!(forward_truncated(&z, &ex).unwrap(), 0.37);
    }

    #[test]
    fn truncated_equals_full_without_sensitive_fields() {
        let mut s = schema();
        s.fields.retain(|f| !f.sensitive);
        let layout = Layout::new(&s, &tiny_config(2)).unwrap();
        let p = init_params(&layout);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let mut ex = random_example(&mut rng);
            ex.sensitive = Features::default();
            assert_eq!(
                forward_full(&p, &ex).unwrap(),
                forward_truncated(&p, &ex).unwrap()
            );
        }
    }

    #[test]
    fn zeroed_sensitive_columns_make_models_agree() {
        let (mut p, mut rng) = setup(3);
        let l = p.layout().clone();
        let d0 = &l.common[0];
        let d_ns = l.d_nonsensitive();
        for o in 0..d0.outputs {
            for i in d_ns..d0.inputs {
                p.values_mut()[d0.offset + o * d0.inputs + i] = 0.0;
            }
        }
        for _ in 0..20 {
            let ex = random_example(&mut rng);
            assert_eq!(
                forward_full(&p, &ex).unwrap(),
                forward_truncated(&p, &ex).unwrap()
            );
        }
    }

    #[test]
    fn truncated_ignores_sensitive_inputs_and_weights() {
        let (p, mut rng) = setup(4);
        let ex = random_example(&mut rng);
        let base = forward_truncated(&p, &ex).unwrap();
        let mut q = p.clone();
        for r in p.layout().sensitive_ranges() {
            for i in r {
                q.values_mut()[i] = rng.random_range(-3.0..3.0);
            }
        }
        let mut ex2 = ex.clone();
        ex2.sensitive = random_example(&mut rng).sensitive;
        assert_eq!(forward_truncated(&q, &ex2).unwrap(), base);
    }

    #[test]
    fn non_finite_reports_layer() {
        let (mut p, mut rng) = setup(5);
        let d = p.layout().common[0].clone();
        p.values_mut()[d.bias_offset()] = f64::INFINITY;
        let err = forward_full(&p, &random_example(&mut rng)).unwrap_err();
        assert!(matches!(err, Error::Numeric { layer } if layer == d.index));
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(800.0, 1.0) < 1e-300);
        assert!((bce_loss(50.0, 0.0) - 50.0).abs() < 1e-12);
        assert!(bce_loss(1e4, 0.0).is_finite());
        assert!(bce_loss(-1e4, 1.0).is_finite());
    }

    #[test]
    fn bce_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let z: f64 = rng.random_range(-60.0..60.0);
            let y: f64 = rng.random();
            assert_eq!(bce_loss(z, y), bce_loss(-z, 1.0 - y));
        }
    }

    fn loss_at(p: &ModelParams, ex: &Example, target: f64, scope: Scope) -> f64 {
        let z = match scope {
            Scope::Full => forward_full(p, ex),
            Scope::Truncated => forward_truncated(p, ex),
        }
        .unwrap();
        bce_loss(z, target)
    }

    /// Initialized parameters with every coordinate (biases included) jittered
    /// so no ReLU sits exactly on its kink.
    fn jittered(seed: u64) -> (ModelParams, ChaCha8Rng) {
        let (mut p, mut rng) = setup(seed);
        for v in p.values_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        (p, rng)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let (p, mut rng) = jittered(100 + seed);
            assert!(p.layout().len <= 500);
            let ex = random_example(&mut rng);
            let target: f64 = rng.random();
            for scope in [Scope::Full, Scope::Truncated] {
                let g = per_example_grad(&p, &ex, target, scope).unwrap();
                let ranges = p.layout().scope_ranges(scope);
                let coords: Vec<usize> = ranges.into_iter().flatten().collect();
                assert_eq!(coords.len(), g.len());
                for (k, &i) in coords.iter().enumerate() {
                    let h = 1e-5;
                    let mut plus = p.clone();
                    plus.values_mut()[i] += h;
                    let mut minus = p.clone();
                    minus.values_mut()[i] -= h;
                    let fd = (loss_at(&plus, &ex, target, scope)
                        - loss_at(&minus, &ex, target, scope))
                        / (2.0 * h);
                    let err = (g.values[k] - fd).abs() / g.values[k].abs().max(fd.abs()).max(1e-4);
                    assert!(err < 1e-4, "seed {seed} coord {i}: {} vs {fd}", g.values[k]);
                }
            }
        }
    }

    #[test]
    fn output_bias_gradient_vanishes_at_target() {
        let (p, mut rng) = setup(6);
        let ex = random_example(&mut rng);
        let z = forward_full(&p, &ex).unwrap();
        let g = per_example_grad(&p, &ex, sigmoid(z), Scope::Full).unwrap();
        let last = p.layout().common.last().unwrap().bias_offset();
        assert!(g.values[last].abs() < 1e-15);
    }

    #[test]
    fn truncated_gradient_zero_on_sensitive_columns() {
        let (p, mut rng) = setup(7);
        let l = p.layout().clone();
        let ex = random_example(&mut rng);
        let g = per_example_grad(&p, &ex, 1.0, Scope::Truncated).unwrap();
        assert_eq!(g.len(), l.scope_len(Scope::Truncated));
        let mut full = vec![f64::NAN; l.len];
        for (i, v) in l
            .scope_ranges(Scope::Truncated)
            .into_iter()
            .flatten()
            .zip(&g.values)
        {
            full[i] = *v;
        }
        let d0 = &l.common[0];
        for o in 0..d0.outputs {
            for i in l.d_nonsensitive()..d0.inputs {
                assert_eq!(full[d0.offset + o * d0.inputs + i], 0.0);
            }
        }
    }
}
