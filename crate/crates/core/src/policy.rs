//! Two-scale policies: one shared nonlinear state encoder, one linear
//! policy matrix per agent.
//!
//! A policy matrix `W` has shape `(d + 1) × |A|`. Column `j` (its `d` feature
//! weights plus the bias in the last row) alone determines action dimension
//! `j`, which is what makes behavior-level genetic operators possible.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::nn::{init_bound, Activation, ForwardCache, Mlp, MlpGrad, Parameters};
use crate::{Error, Result};

/// Encoded states. Kept distinct from raw state batches so features can never
/// be handed to a value function by accident.
#[derive(Debug, Clone, PartialEq)]
pub struct Features(Array2<f64>);

impl Features {
    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    #[cfg(test)]
    pub(crate) fn from_array(a: Array2<f64>) -> Self {
        Features(a)
    }
}

/// The shared encoder `z = Z(s)`. Its last layer is always tanh so every
/// feature lies in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedRepresentation {
    encoder: Mlp,
}

impl SharedRepresentation {
    pub fn new(encoder: Mlp) -> Result<Self> {
        let last = encoder.layers().last().expect("non-empty").activation();
        if last != Activation::Tanh {
            return Err(Error::Config(format!(
                "shared encoder must end in tanh, found {last:?}"
            )));
        }
        Ok(SharedRepresentation { encoder })
    }

    /// `hidden` lists every layer width; the last entry is the feature width `d`.
    pub fn init<R: Rng + ?Sized>(state_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "encoder widths {hidden:?} must be non-empty and positive"
            )));
        }
        let d = hidden[hidden.len() - 1];
        let encoder = Mlp::init(
            state_dim,
            &hidden[..hidden.len() - 1],
            d,
            Activation::Tanh,
            Activation::Tanh,
            rng,
        );
        Self::new(encoder)
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn state_dim(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_width()
    }

    pub fn encode(&self, states: ArrayView2<f64>) -> Result<Features> {
        self.encoder.predict(states).map(Features)
    }

    pub fn encode_with_cache(&self, states: ArrayView2<f64>) -> Result<(Features, ForwardCache)> {
        let (z, cache) = self.encoder.forward(states)?;
        Ok((Features(z), cache))
    }

    /// Parameter gradient given `∂L/∂z` for the batch that produced `cache`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_features: ArrayView2<f64>,
    ) -> Result<MlpGrad> {
        self.encoder.backward(cache, grad_features).map(|(g, _)| g)
    }
}

impl Parameters for SharedRepresentation {
    fn tensors(&self) -> Vec<&[f64]> {
        self.encoder.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.encoder.tensors_mut()
    }
}

/// Per-agent linear policy matrix, rows = feature index (+ bias row),
/// columns = action dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRepresentation {
    matrix: Array2<f64>,
}

impl PolicyRepresentation {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() < 2 || matrix.ncols() == 0 {
            return Err(Error::shape(
                "PolicyRepresentation",
                "(d+1)×|A| with d ≥ 1",
                format!("{:?}", matrix.dim()),
            ));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy representation".into()));
        }
        Ok(PolicyRepresentation {
            matrix: matrix.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(feature_dim: usize, action_dim: usize) -> Self {
        PolicyRepresentation {
            matrix: Array2::zeros((feature_dim + 1, action_dim)),
        }
    }

    /// Same init as a dense layer with fan-in `d`.
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, action_dim: usize, rng: &mut R) -> Self {
        let bound = init_bound(feature_dim);
        PolicyRepresentation {
            matrix: Array2::from_shape_fn((feature_dim + 1, action_dim), |_| {
                rng.random_range(-bound..=bound)
            }),
        }
    }

    /// Half-width of the init range; the mutation reset branch draws from it.
    pub fn init_bound(&self) -> f64 {
        init_bound(self.feature_dim())
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Array2<f64> {
        &mut self.matrix
    }

    pub fn feature_dim(&self) -> usize {
        self.matrix.nrows() - 1
    }

    pub fn action_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.matrix.column(j)
    }

    pub fn set_column(&mut self, j: usize, values: ArrayView1<f64>) {
        self.matrix.column_mut(j).assign(&values);
    }

    pub fn same_shape(&self, other: &PolicyRepresentation) -> bool {
        self.matrix.dim() == other.matrix.dim()
    }

    fn check(&self, features: &Features) -> Result<()> {
        if features.width() != self.feature_dim() {
            return Err(Error::shape(
                "policy features",
                self.feature_dim(),
                features.width(),
            ));
        }
        Ok(())
    }

    /// `zᵀ W[0..d] + W[d]` for every row of the batch.
    pub fn pre_actions(&self, features: &Features) -> Result<Array2<f64>> {
        self.check(features)?;
        let d = self.feature_dim();
        let mut pre = features.0.dot(&self.matrix.slice(s![..d, ..]));
        pre += &self.matrix.row(d);
        Ok(pre)
    }
}

impl Parameters for PolicyRepresentation {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.matrix.as_slice().expect("standard layout")]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.matrix.as_slice_mut().expect("standard layout")]
    }
}

/// Per-dimension action bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpec {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl ActionSpec {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() || low.is_empty() {
            return Err(Error::shape("ActionSpec bounds", low.len(), high.len()));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(Error::Config(format!(
                "action bounds need low < high: {low:?} {high:?}"
            )));
        }
        Ok(ActionSpec { low, high })
    }

    pub fn symmetric(dim: usize, bound: f64) -> Self {
        ActionSpec {
            low: vec![-bound; dim],
            high: vec![bound; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    pub fn half_range(&self, i: usize) -> f64 {
        0.5 * (self.high[i] - self.low[i])
    }

    /// `low + (tanh(x) + 1)/2 · (high − low)`.
    #[inline]
    pub fn squash(&self, i: usize, pre: f64) -> f64 {
        self.low[i] + (pre.tanh() + 1.0) * 0.5 * (self.high[i] - self.low[i])
    }

    pub fn clamp(&self, action: &mut [f64]) -> bool {
        let mut clamped = false;
        for ((a, &l), &h) in action.iter_mut().zip(&self.low).zip(&self.high) {
            let c = a.clamp(l, h);
            if c != *a {
                clamped = true;
                *a = c;
            }
        }
        clamped
    }

    pub fn contains(&self, action: &[f64]) -> bool {
        action.len() == self.dim()
            && action
                .iter()
                .zip(&self.low)
                .zip(&self.high)
                .all(|((a, l), h)| a >= l && a <= h)
    }
}

/// Squash a batch of pre-activations into the action box.
pub fn squash_actions(pre: &Array2<f64>, spec: &ActionSpec) -> Result<Array2<f64>> {
    if pre.ncols() != spec.dim() {
        return Err(Error::shape("action dimension", spec.dim(), pre.ncols()));
    }
    let mut out = pre.clone();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = spec.squash(j, *v);
        }
    }
    Ok(out)
}

/// Actions of policy `w` for a batch of encoded states.
pub fn act(
    features: &Features,
    w: &PolicyRepresentation,
    spec: &ActionSpec,
) -> Result<Array2<f64>> {
    let pre = w.pre_actions(features)?;
    squash_actions(&pre, spec)
}

/// Actions of policy `(z, w)` for a batch of raw states.
pub fn policy_forward(
    z: &SharedRepresentation,
    w: &PolicyRepresentation,
    spec: &ActionSpec,
    states: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let features = z.encode(states)?;
    act(&features, w, spec)
}

/// Single-state convenience wrapper around [`policy_forward`].
pub fn policy_action(
    z: &SharedRepresentation,
    w: &PolicyRepresentation,
    spec: &ActionSpec,
    state: &[f64],
) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, state.len()), state)
        .map_err(|_| Error::shape("policy_action state", "1×n", state.len()))?;
    Ok(policy_forward(z, w, spec, view)?.row(0).to_vec())
}

/// Backprop through `a = squash(zᵀW[0..d] + W[d])`.
///
/// Given `∂L/∂a` returns `(∂L/∂W, ∂L/∂z)`.
pub fn act_backward(
    features: &Features,
    w: &PolicyRepresentation,
    spec: &ActionSpec,
    grad_actions: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let pre = w.pre_actions(features)?;
    if grad_actions.dim() != pre.dim() {
        return Err(Error::shape(
            "act_backward grad",
            format!("{:?}", pre.dim()),
            format!("{:?}", grad_actions.dim()),
        ));
    }
    let mut g_pre = grad_actions.to_owned();
    for (mut g_row, pre_row) in g_pre.rows_mut().into_iter().zip(pre.rows()) {
        for (j, (g, &x)) in g_row.iter_mut().zip(pre_row).enumerate() {
            let t = x.tanh();
            *g *= (1.0 - t * t) * spec.half_range(j);
        }
    }
    let d = w.feature_dim();
    let mut grad_w = Array2::zeros(w.matrix.raw_dim());
    grad_w
        .slice_mut(s![..d, ..])
        .assign(&features.0.t().dot(&g_pre));
    grad_w.row_mut(d).assign(&g_pre.sum_axis(Axis(0)));
    let grad_z = g_pre.dot(&w.matrix.slice(s![..d, ..]).t());
    Ok((grad_w, grad_z))
}

/// Wrap a raw gradient matrix so it can feed an optimizer.
pub fn policy_gradient(grad: Array2<f64>) -> PolicyRepresentation {
    PolicyRepresentation {
        matrix: grad.as_standard_layout().into_owned(),
    }
}

/// Stack single states into a batch.
pub fn stack_rows(rows: &[&[f64]]) -> Result<Array2<f64>> {
    let width = rows.first().map_or(0, |r| r.len());
    let mut flat = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(Error::shape("stack_rows", width, r.len()));
        }
        flat.extend_from_slice(r);
    }
    Array2::from_shape_vec((rows.len(), width), flat)
        .map_err(|e| Error::shape("stack_rows", width, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn dense_zero(inputs: usize, outputs: usize, act: Activation) -> Dense {
        Dense::new(
            Array2::zeros((outputs, inputs)),
            Array1::zeros(outputs),
            act,
        )
        .expect("positive widths")
    }

    fn random_states(n: usize, width: usize, seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        Array2::from_shape_fn((n, width), |_| r.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let enc = Mlp::new(vec![
            dense_zero(4, 8, Activation::Tanh),
            dense_zero(8, 3, Activation::Tanh),
        ])
        .unwrap();
        let z = SharedRepresentation::new(enc).unwrap();
        let f = z.encode(random_states(5, 4, 1).view()).unwrap();
        assert!(f.as_array().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_must_end_in_tanh() {
        let enc = Mlp::new(vec![dense_zero(4, 3, Activation::Identity)]).unwrap();
        assert!(SharedRepresentation::new(enc).is_err());
    }

    #[test]
    fn encoding_is_bounded_and_deterministic() {
        let z = SharedRepresentation::init(4, &[16, 8], &mut rng(2)).unwrap();
        let s = random_states(32, 4, 3) * 10.0;
        let a = z.encode(s.view()).unwrap();
        let b = z.encode(s.view()).unwrap();
        assert_eq!(a, b);
        assert!(a.as_array().iter().all(|v| (-1.0..=1.0).contains(v)));
        // composition oracle: same as running the encoder MLP directly
        assert_eq!(a.as_array(), &z.encoder().predict(s.view()).unwrap());
        assert!(z.encode(random_states(2, 5, 0).view()).is_err());
    }

    #[test]
    fn zero_policy_acts_at_midpoint() {
        let spec = ActionSpec::new(vec![-1.0, 0.0, 2.0], vec![1.0, 4.0, 3.0]).unwrap();
        let w = PolicyRepresentation::zeros(5, 3);
        let f = Features::from_array(random_states(4, 5, 1));
        let a = act(&f, &w, &spec).unwrap();
        for row in a.rows() {
            assert_eq!(row.to_vec(), vec![0.0, 2.0, 2.5]);
        }
    }

    #[test]
    fn large_bias_saturates() {
        let spec = ActionSpec::symmetric(2, 1.0);
        let mut w = PolicyRepresentation::zeros(3, 2);
        w.matrix_mut()[[3, 1]] = 100.0;
        let f = Features::from_array(random_states(3, 3, 4).mapv(f64::tanh));
        let a = act(&f, &w, &spec).unwrap();
        for row in a.rows() {
            assert!((row[1] - 1.0).abs() < 1e-8);
            assert_eq!(row[0], 0.0);
        }
    }

    #[test]
    fn act_matches_naive_loops() {
        let mut r = rng(7);
        let spec = ActionSpec::new(vec![-2.0, -0.5], vec![2.0, 1.5]).unwrap();
        let w = PolicyRepresentation::init(6, 2, &mut r);
        let f = Features::from_array(random_states(10, 6, 8).mapv(f64::tanh));
        let a = act(&f, &w, &spec).unwrap();
        for i in 0..10 {
            for j in 0..2 {
                let mut pre = w.matrix()[[6, j]];
                for k in 0..6 {
                    pre += f.row(i)[k] * w.matrix()[[k, j]];
                }
                let expected =
                    spec.low()[j] + (pre.tanh() + 1.0) / 2.0 * (spec.high()[j] - spec.low()[j]);
                assert!((a[[i, j]] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            }
        }
    }

    #[test]
    fn policy_forward_composes_and_agents_with_same_matrix_agree() {
        let mut r = rng(9);
        let z = SharedRepresentation::init(3, &[8, 4], &mut r).unwrap();
        let spec = ActionSpec::symmetric(2, 1.0);
        let w = PolicyRepresentation::init(4, 2, &mut r);
        let s = random_states(20, 3, 10);
        let direct = policy_forward(&z, &w, &spec, s.view()).unwrap();
        let composed = act(&z.encode(s.view()).unwrap(), &w, &spec).unwrap();
        assert_eq!(direct, composed);
        let twin = w.clone();
        assert_eq!(policy_forward(&z, &twin, &spec, s.view()).unwrap(), direct);
        let single = policy_action(&z, &w, &spec, s.row(3).as_slice().unwrap()).unwrap();
        assert_eq!(single, direct.row(3).to_vec());
    }

    #[test]
    fn editing_one_column_only_moves_that_action_dimension() {
        let mut r = rng(11);
        let z = SharedRepresentation::init(4, &[16, 8], &mut r).unwrap();
        let spec = ActionSpec::symmetric(3, 2.0);
        let w = PolicyRepresentation::init(8, 3, &mut r);
        let s = random_states(256, 4, 12);
        let before = policy_forward(&z, &w, &spec, s.view()).unwrap();
        for j in 0..3 {
            let mut edited = w.clone();
            let fresh = PolicyRepresentation::init(8, 3, &mut r);
            edited.set_column(j, fresh.column(j));
            let after = policy_forward(&z, &edited, &spec, s.view()).unwrap();
            for k in (0..3).filter(|&k| k != j) {
                assert_eq!(after.column(k), before.column(k));
            }
            assert_ne!(after.column(j), before.column(j));
        }
    }

    #[test]
    fn act_backward_matches_finite_differences() {
        let mut r = rng(13);
        let spec = ActionSpec::new(vec![-1.0, 0.0], vec![1.0, 3.0]).unwrap();
        let w = PolicyRepresentation::init(5, 2, &mut r);
        let f = Features::from_array(random_states(6, 5, 14).mapv(f64::tanh));
        let g = random_states(6, 2, 15);
        let loss = |w: &PolicyRepresentation, f: &Features| (act(f, w, &spec).unwrap() * &g).sum();
        let (gw, gz) = act_backward(&f, &w, &spec, g.view()).unwrap();
        let h = 1e-5;
        for idx in 0..w.num_parameters() {
            let mut flat = w.flatten();
            flat[idx] += h;
            let mut wp = w.clone();
            wp.assign_flat(&flat).unwrap();
            let up = loss(&wp, &f);
            flat[idx] -= 2.0 * h;
            wp.assign_flat(&flat).unwrap();
            let down = loss(&wp, &f);
            let fd = (up - down) / (2.0 * h);
            let a = gw.as_slice().unwrap()[idx];
            assert!((fd - a).abs() / fd.abs().max(a.abs()).max(1e-4) < 1e-5);
        }
        for i in 0..6 {
            for k in 0..5 {
                let mut fp = f.as_array().clone();
                fp[[i, k]] += h;
                let up = loss(&w, &Features::from_array(fp.clone()));
                fp[[i, k]] -= 2.0 * h;
                let down = loss(&w, &Features::from_array(fp));
                let fd = (up - down) / (2.0 * h);
                assert!((fd - gz[[i, k]]).abs() / fd.abs().max(gz[[i, k]].abs()).max(1e-4) < 1e-5);
            }
        }
    }

    #[test]
    fn action_spec_validation_and_bounds() {
        assert!(ActionSpec::new(vec![1.0], vec![1.0]).is_err());
        assert!(ActionSpec::new(vec![0.0, 0.0], vec![1.0]).is_err());
        let spec = ActionSpec::new(vec![-2.0], vec![2.0]).unwrap();
        for pre in [-1e6, -3.0, 0.0, 0.7, 1e6] {
            let a = spec.squash(0, pre);
            assert!(spec.contains(&[a]));
        }
        let mut a = [5.0];
        assert!(spec.clamp(&mut a));
        assert_eq!(a, [2.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn actions_stay_in_bounds_and_columns_stay_local(
            seed in 0u64..10_000,
            scale in 0.1f64..50.0,
            col in 0usize..3,
            low in -3.0f64..0.0,
            width in 0.1f64..4.0,
        ) {
            let mut r = rng(seed);
            let z = SharedRepresentation::init(4, &[16, 8], &mut r).unwrap();
            let spec = ActionSpec::new(vec![low, -1.0, 0.5], vec![low + width, 1.0, 0.75]).unwrap();
            let mut w = PolicyRepresentation::init(8, 3, &mut r);
            w.matrix_mut().mapv_inplace(|v| v * scale);
            let s = random_states(64, 4, seed ^ 0x5eed);
            let before = policy_forward(&z, &w, &spec, s.view()).unwrap();
            for row in before.rows() {
                for (j, a) in row.iter().enumerate() {
                    prop_assert!(*a >= spec.low()[j] && *a <= spec.high()[j]);
                }
            }
            let mut edited = w.clone();
            let fresh = PolicyRepresentation::init(8, 3, &mut r);
            edited.set_column(col, fresh.column(col));
            let after = policy_forward(&z, &edited, &spec, s.view()).unwrap();
            for k in (0..3).filter(|&k| k != col) {
                prop_assert_eq!(after.column(k), before.column(k));
            }
        }
    }
}
