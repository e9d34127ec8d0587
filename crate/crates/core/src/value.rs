//! Value functions on raw states: the RL critic `Q_ψ(s, a)` and the
//! policy-extended value function `Q_θ(s, a, W)`.
//!
//! Both take the raw state batch. Encoded [`Features`](crate::policy::Features)
//! have their own type and are never accepted here.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::nn::{Activation, ForwardCache, Mlp, MlpGrad, Parameters};
use crate::policy::PolicyRepresentation;
use crate::{Error, Result};

/// Which head(s) of a twin value function to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QMode {
    /// Clipped double-Q: elementwise minimum over heads.
    Min,
    Q1,
    Q2,
}

/// A value function that can report `Q(s, a)` and `∂Q/∂a` (first head).
pub trait ActionValue {
    fn value_and_action_grad(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)>;
}

/// Same as [`ActionValue`] for value functions conditioned on a policy.
pub trait PolicyActionValue {
    fn value_and_action_grad(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        policy: &PolicyRepresentation,
    ) -> Result<(Array1<f64>, Array2<f64>)>;
}

/// Single-sample bootstrap value used by the surrogate fitness.
pub trait BootstrapValue {
    fn bootstrap(
        &self,
        state: &[f64],
        action: &[f64],
        policy: &PolicyRepresentation,
    ) -> Result<f64>;
}

fn concat_inputs(parts: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
    let rows = parts[0].nrows();
    if let Some(p) = parts.iter().find(|p| p.nrows() != rows) {
        return Err(Error::shape("value input batch", rows, p.nrows()));
    }
    concatenate(Axis(1), parts).map_err(|e| Error::shape("value input", "concatenable", e))
}

fn combine(values: Vec<Array1<f64>>, mode: QMode) -> Array1<f64> {
    match (mode, values.len()) {
        (QMode::Q1, _) | (_, 1) => values.into_iter().next().expect("one head"),
        (QMode::Q2, _) => values.into_iter().nth(1).expect("two heads"),
        (QMode::Min, _) => {
            let mut it = values.into_iter();
            let mut out = it.next().expect("one head");
            for v in it {
                out.zip_mut_with(&v, |a, &b| *a = a.min(b));
            }
            out
        }
    }
}

/// Column mean whose result does not depend on row order: each column is
/// summed in sorted order.
fn order_free_mean(rows: &Array2<f64>) -> Array1<f64> {
    let n = rows.nrows() as f64;
    let mut buf = Vec::with_capacity(rows.nrows());
    rows.columns()
        .into_iter()
        .map(|c| {
            buf.clear();
            buf.extend(c.iter().copied());
            buf.sort_by(f64::total_cmp);
            buf.iter().sum::<f64>() / n
        })
        .collect()
}

fn check_head(head: &Mlp, inputs: usize) -> Result<()> {
    if head.input_width() != inputs {
        return Err(Error::shape("value head input", inputs, head.input_width()));
    }
    if head.output_width() != 1 {
        return Err(Error::shape("value head output", 1, head.output_width()));
    }
    Ok(())
}

/// Gradient holder for a list of heads (and optionally an encoder).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadsGrad {
    pub encoder: Option<MlpGrad>,
    pub heads: Vec<MlpGrad>,
}

impl Parameters for HeadsGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        if let Some(e) = &self.encoder {
            out.extend(e.tensors());
        }
        for h in &self.heads {
            out.extend(h.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.encoder {
            out.extend(e.tensors_mut());
        }
        for h in &mut self.heads {
            out.extend(h.tensors_mut());
        }
        out
    }
}

/// The RL critic: one head (DDPG) or twin heads (TD3) over `concat(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    heads: Vec<Mlp>,
    state_dim: usize,
    action_dim: usize,
}

impl Critic {
    pub fn init<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        twin: bool,
        rng: &mut R,
    ) -> Self {
        let n = if twin { 2 } else { 1 };
        let heads = (0..n)
            .map(|_| {
                Mlp::init(
                    state_dim + action_dim,
                    hidden,
                    1,
                    Activation::LeakyRelu,
                    Activation::Identity,
                    rng,
                )
            })
            .collect();
        Critic {
            heads,
            state_dim,
            action_dim,
        }
    }

    pub fn from_heads(state_dim: usize, action_dim: usize, heads: Vec<Mlp>) -> Result<Self> {
        if heads.is_empty() || heads.len() > 2 {
            return Err(Error::Config(format!(
                "critic needs 1 or 2 heads, got {}",
                heads.len()
            )));
        }
        for h in &heads {
            check_head(h, state_dim + action_dim)?;
        }
        Ok(Critic {
            heads,
            state_dim,
            action_dim,
        })
    }

    pub fn heads(&self) -> &[Mlp] {
        &self.heads
    }

    pub fn is_twin(&self) -> bool {
        self.heads.len() == 2
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn inputs(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        if states.ncols() != self.state_dim {
            return Err(Error::shape(
                "critic state width",
                self.state_dim,
                states.ncols(),
            ));
        }
        if actions.ncols() != self.action_dim {
            return Err(Error::shape(
                "critic action width",
                self.action_dim,
                actions.ncols(),
            ));
        }
        concat_inputs(&[states, actions])
    }

    pub fn head_values(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<Vec<Array1<f64>>> {
        let x = self.inputs(states, actions)?;
        self.heads
            .iter()
            .map(|h| h.predict(x.view()).map(|q| q.column(0).to_owned()))
            .collect()
    }

    pub fn eval(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        mode: QMode,
    ) -> Result<Array1<f64>> {
        Ok(combine(self.head_values(states, actions)?, mode))
    }

    /// Loss `mean_h mean_b (Q_h(s_b, a_b) − y_b)²` and its gradient.
    pub fn regression(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        targets: &Array1<f64>,
    ) -> Result<(f64, HeadsGrad)> {
        let x = self.inputs(states, actions)?;
        if targets.len() != x.nrows() {
            return Err(Error::shape("critic targets", x.nrows(), targets.len()));
        }
        let scale = 1.0 / (x.nrows() as f64 * self.heads.len() as f64);
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let (q, cache) = h.forward(x.view())?;
            let err = &q.column(0) - targets;
            loss += err.mapv(|e| e * e).sum() * scale;
            let g = (err * (2.0 * scale)).insert_axis(Axis(1));
            grads.push(h.backward(&cache, g.view())?.0);
        }
        Ok((
            loss,
            HeadsGrad {
                encoder: None,
                heads: grads,
            },
        ))
    }
}

impl ActionValue for Critic {
    fn value_and_action_grad(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let x = self.inputs(states, actions)?;
        let head = &self.heads[0];
        let (q, cache) = head.forward(x.view())?;
        let ones = Array2::ones((x.nrows(), 1));
        let (_, gin) = head.backward(&cache, ones.view())?;
        let ga = gin.slice(s![.., self.state_dim..]).to_owned();
        Ok((q.column(0).to_owned(), ga))
    }
}

impl Parameters for Critic {
    fn tensors(&self) -> Vec<&[f64]> {
        self.heads.iter().flat_map(|h| h.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.heads
            .iter_mut()
            .flat_map(|h| h.tensors_mut())
            .collect()
    }
}

/// Policy-extended value function `Q_θ(s, a, W)`.
///
/// Each column of `W` (length `d + 1`) goes through the column encoder; the
/// policy embedding is the mean of the column embeddings, so it does not
/// depend on the order of action dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PeVfa {
    encoder: Mlp,
    heads: Vec<Mlp>,
    state_dim: usize,
    action_dim: usize,
}

/// Shapes of a [`PeVfa`].
#[derive(Debug, Clone, PartialEq)]
pub struct PeVfaShape {
    pub state_dim: usize,
    pub action_dim: usize,
    pub feature_dim: usize,
    /// Hidden widths of the column encoder; the embedding width comes last.
    pub encoder_widths: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub twin: bool,
}

impl PeVfa {
    pub fn init<R: Rng + ?Sized>(shape: &PeVfaShape, rng: &mut R) -> Result<Self> {
        let (&embed, enc_hidden) = shape
            .encoder_widths
            .split_last()
            .ok_or_else(|| Error::Config("PeVFA encoder needs at least one layer".into()))?;
        let encoder = Mlp::init(
            shape.feature_dim + 1,
            enc_hidden,
            embed,
            Activation::LeakyRelu,
            Activation::Identity,
            rng,
        );
        let n = if shape.twin { 2 } else { 1 };
        let heads = (0..n)
            .map(|_| {
                Mlp::init(
                    shape.state_dim + shape.action_dim + embed,
                    &shape.head_hidden,
                    1,
                    Activation::LeakyRelu,
                    Activation::Identity,
                    rng,
                )
            })
            .collect();
        Ok(PeVfa {
            encoder,
            heads,
            state_dim: shape.state_dim,
            action_dim: shape.action_dim,
        })
    }

    pub fn from_parts(
        state_dim: usize,
        action_dim: usize,
        encoder: Mlp,
        heads: Vec<Mlp>,
    ) -> Result<Self> {
        if heads.is_empty() || heads.len() > 2 {
            return Err(Error::Config(format!(
                "PeVFA needs 1 or 2 heads, got {}",
                heads.len()
            )));
        }
        for h in &heads {
            check_head(h, state_dim + action_dim + encoder.output_width())?;
        }
        Ok(PeVfa {
            encoder,
            heads,
            state_dim,
            action_dim,
        })
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn heads(&self) -> &[Mlp] {
        &self.heads
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.output_width()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn columns(&self, w: &PolicyRepresentation) -> Result<Array2<f64>> {
        if w.feature_dim() + 1 != self.encoder.input_width() || w.action_dim() != self.action_dim {
            return Err(Error::shape(
                "PeVFA policy representation",
                format!("({}, {})", self.encoder.input_width(), self.action_dim),
                format!("{:?}", w.matrix().dim()),
            ));
        }
        // one row per action dimension
        Ok(w.matrix().t().as_standard_layout().into_owned())
    }

    /// Policy embedding: mean over action dimensions of the encoded columns.
    pub fn encode_policy(&self, w: &PolicyRepresentation) -> Result<Array1<f64>> {
        let cols = self.columns(w)?;
        let e = self.encoder.predict(cols.view())?;
        Ok(order_free_mean(&e))
    }

    fn encode_policy_with_cache(
        &self,
        w: &PolicyRepresentation,
    ) -> Result<(Array1<f64>, ForwardCache)> {
        let cols = self.columns(w)?;
        let (e, cache) = self.encoder.forward(cols.view())?;
        Ok((order_free_mean(&e), cache))
    }

    fn inputs(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        embedding: &Array1<f64>,
    ) -> Result<Array2<f64>> {
        if states.ncols() != self.state_dim {
            return Err(Error::shape(
                "PeVFA state width",
                self.state_dim,
                states.ncols(),
            ));
        }
        if actions.ncols() != self.action_dim {
            return Err(Error::shape(
                "PeVFA action width",
                self.action_dim,
                actions.ncols(),
            ));
        }
        let e = embedding
            .broadcast((states.nrows(), embedding.len()))
            .expect("broadcast embedding");
        concat_inputs(&[states, actions, e])
    }

    pub fn head_values(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        w: &PolicyRepresentation,
    ) -> Result<Vec<Array1<f64>>> {
        let e = self.encode_policy(w)?;
        let x = self.inputs(states, actions, &e)?;
        self.heads
            .iter()
            .map(|h| h.predict(x.view()).map(|q| q.column(0).to_owned()))
            .collect()
    }

    pub fn eval(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        w: &PolicyRepresentation,
        mode: QMode,
    ) -> Result<Array1<f64>> {
        Ok(combine(self.head_values(states, actions, w)?, mode))
    }

    /// Regression of every head towards `targets`, one policy per group.
    ///
    /// Loss is `mean_h mean_b (Q_h(s_b, a_b, W_{g(b)}) − y_b)²` over all rows of
    /// all groups; the gradient covers heads and the column encoder.
    pub fn regression(&self, groups: &[RegressionGroup<'_>]) -> Result<(f64, HeadsGrad)> {
        let total: usize = groups.iter().map(|g| g.targets.len()).sum();
        if total == 0 {
            return Err(Error::Buffer("empty PeVFA regression batch".into()));
        }
        let scale = 1.0 / (total as f64 * self.heads.len() as f64);
        let embed = self.embedding_dim();
        let mut loss = 0.0;
        let mut enc_grad = MlpGrad::zeros_like(&self.encoder);
        let mut head_grads: Vec<MlpGrad> = self.heads.iter().map(MlpGrad::zeros_like).collect();
        for group in groups {
            let (e, enc_cache) = self.encode_policy_with_cache(group.policy)?;
            let x = self.inputs(group.states, group.actions, &e)?;
            if group.targets.len() != x.nrows() {
                return Err(Error::shape(
                    "PeVFA targets",
                    x.nrows(),
                    group.targets.len(),
                ));
            }
            let mut g_embed = Array1::<f64>::zeros(embed);
            for (h, hg) in self.heads.iter().zip(head_grads.iter_mut()) {
                let (q, cache) = h.forward(x.view())?;
                let err = &q.column(0) - group.targets;
                loss += err.mapv(|v| v * v).sum() * scale;
                let g = (err * (2.0 * scale)).insert_axis(Axis(1));
                let (grad, gin) = h.backward(&cache, g.view())?;
                hg.add_assign(&grad);
                g_embed += &gin
                    .slice(s![.., self.state_dim + self.action_dim..])
                    .sum_axis(Axis(0));
            }
            let cols = enc_cache.batch();
            let g_cols = g_embed
                .mapv(|v| v / cols as f64)
                .broadcast((cols, embed))
                .expect("broadcast")
                .to_owned();
            let (eg, _) = self.encoder.backward(&enc_cache, g_cols.view())?;
            enc_grad.add_assign(&eg);
        }
        Ok((
            loss,
            HeadsGrad {
                encoder: Some(enc_grad),
                heads: head_grads,
            },
        ))
    }
}

/// One policy and the transitions paired with it in a PeVFA regression.
#[derive(Debug, Clone)]
pub struct RegressionGroup<'a> {
    pub policy: &'a PolicyRepresentation,
    pub states: ArrayView2<'a, f64>,
    pub actions: ArrayView2<'a, f64>,
    pub targets: &'a Array1<f64>,
}

impl PolicyActionValue for PeVfa {
    fn value_and_action_grad(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        policy: &PolicyRepresentation,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let e = self.encode_policy(policy)?;
        let x = self.inputs(states, actions, &e)?;
        let head = &self.heads[0];
        let (q, cache) = head.forward(x.view())?;
        let ones = Array2::ones((x.nrows(), 1));
        let (_, gin) = head.backward(&cache, ones.view())?;
        let ga = gin
            .slice(s![.., self.state_dim..self.state_dim + self.action_dim])
            .to_owned();
        Ok((q.column(0).to_owned(), ga))
    }
}

impl BootstrapValue for PeVfa {
    fn bootstrap(
        &self,
        state: &[f64],
        action: &[f64],
        policy: &PolicyRepresentation,
    ) -> Result<f64> {
        let s = ArrayView2::from_shape((1, state.len()), state)
            .map_err(|_| Error::shape("bootstrap state", self.state_dim, state.len()))?;
        let a = ArrayView2::from_shape((1, action.len()), action)
            .map_err(|_| Error::shape("bootstrap action", self.action_dim, action.len()))?;
        Ok(self.eval(s, a, policy, QMode::Min)?[0])
    }
}

impl Parameters for PeVfa {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.tensors();
        for h in &self.heads {
            out.extend(h.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        for h in &mut self.heads {
            out.extend(h.tensors_mut());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    fn shape() -> PeVfaShape {
        PeVfaShape {
            state_dim: 4,
            action_dim: 3,
            feature_dim: 6,
            encoder_widths: vec![64, 64, 64],
            head_hidden: vec![32, 32],
            twin: true,
        }
    }

    fn constant_head(inputs: usize, value: f64) -> Mlp {
        Mlp::new(vec![Dense::new(
            Array2::zeros((1, inputs)),
            array![value],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn single_column_embedding_is_that_columns_encoding() {
        let mut s = shape();
        s.action_dim = 1;
        let q = PeVfa::init(&s, &mut rng(1)).unwrap();
        let w = PolicyRepresentation::init(6, 1, &mut rng(2));
        let direct = q.encoder().predict(w.matrix().t()).unwrap();
        assert_eq!(q.encode_policy(&w).unwrap(), direct.row(0));
    }

    #[test]
    fn identical_columns_embed_like_one_column() {
        let q = PeVfa::init(&shape(), &mut rng(1)).unwrap();
        let base = PolicyRepresentation::init(6, 1, &mut rng(3));
        let mut w = PolicyRepresentation::zeros(6, 3);
        for j in 0..3 {
            w.set_column(j, base.column(0));
        }
        let single = q.encoder().predict(base.matrix().t()).unwrap();
        let e = q.encode_policy(&w).unwrap();
        // (x + x + x) / 3 rounds back to x only up to one ulp
        for (a, b) in e.iter().zip(single.row(0)) {
            assert!((a - b).abs() <= 2.0 * f64::EPSILON * b.abs());
        }
    }

    #[test]
    fn embedding_and_value_ignore_column_order() {
        let q = PeVfa::init(&shape(), &mut rng(4)).unwrap();
        let mut r = rng(5);
        let states = random(16, 4, 6);
        for _ in 0..20 {
            let w = PolicyRepresentation::init(6, 3, &mut r);
            let mut perm: Vec<usize> = (0..3).collect();
            perm.shuffle(&mut r);
            let mut permuted = w.clone();
            for (dst, &src) in perm.iter().enumerate() {
                permuted.set_column(dst, w.column(src));
            }
            let actions = random(16, 3, r.random());
            let a = q.encode_policy(&w).unwrap();
            let b = q.encode_policy(&permuted).unwrap();
            assert_eq!(a, b);
            let va = q
                .eval(states.view(), actions.view(), &w, QMode::Min)
                .unwrap();
            let vb = q
                .eval(states.view(), actions.view(), &permuted, QMode::Min)
                .unwrap();
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn critic_modes() {
        let head = Mlp::init(
            5,
            &[8],
            1,
            Activation::LeakyRelu,
            Activation::Identity,
            &mut rng(1),
        );
        let twin = Critic::from_heads(3, 2, vec![head.clone(), head.clone()]).unwrap();
        let s = random(7, 3, 2);
        let a = random(7, 2, 3);
        let q1 = twin.eval(s.view(), a.view(), QMode::Q1).unwrap();
        assert_eq!(twin.eval(s.view(), a.view(), QMode::Q2).unwrap(), q1);
        assert_eq!(twin.eval(s.view(), a.view(), QMode::Min).unwrap(), q1);

        let stub =
            Critic::from_heads(3, 2, vec![constant_head(5, 3.0), constant_head(5, 2.5)]).unwrap();
        assert_eq!(stub.eval(s.view(), a.view(), QMode::Min).unwrap()[0], 2.5);

        let single = Critic::from_heads(3, 2, vec![head]).unwrap();
        for mode in [QMode::Min, QMode::Q1, QMode::Q2] {
            assert_eq!(single.eval(s.view(), a.view(), mode).unwrap(), q1);
        }
        assert!(single.eval(a.view(), s.view(), QMode::Q1).is_err());
    }

    #[test]
    fn summing_head_is_hand_computable() {
        // encoder: single identity layer reading the bias entry only
        let mut enc_w = Array2::zeros((2, 3));
        enc_w[[0, 2]] = 1.0;
        let enc = Mlp::new(vec![Dense::new(
            enc_w,
            array![0.0, 1.0],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        // head: sum of all inputs
        let head = Mlp::new(vec![Dense::new(
            Array2::ones((1, 2 + 1 + 2)),
            array![0.0],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let q = PeVfa::from_parts(2, 1, enc, vec![head]).unwrap();
        let w = PolicyRepresentation::new(array![[9.0], [9.0], [0.5]]).unwrap();
        let v = q
            .eval(
                array![[1.0, 2.0]].view(),
                array![[3.0]].view(),
                &w,
                QMode::Min,
            )
            .unwrap();
        // 1 + 2 + 3 + embedding (0.5, 1.0)
        assert_eq!(v[0], 7.5);
    }

    fn fd_check<P: Parameters + Clone>(params: &P, analytic: &[f64], loss: impl Fn(&P) -> f64) {
        let base = params.flatten();
        assert_eq!(base.len(), analytic.len());
        let h = 1e-5;
        for i in 0..base.len() {
            let mut p = params.clone();
            let mut v = base.clone();
            v[i] += h;
            p.assign_flat(&v).unwrap();
            let up = loss(&p);
            v[i] -= 2.0 * h;
            p.assign_flat(&v).unwrap();
            let down = loss(&p);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-4);
            assert!(rel < 1e-5, "entry {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn pevfa_regression_gradient_matches_finite_differences() {
        let mut s = shape();
        s.encoder_widths = vec![8, 8, 5];
        s.head_hidden = vec![6];
        let q = PeVfa::init(&s, &mut rng(7)).unwrap();
        let w = PolicyRepresentation::init(6, 3, &mut rng(8));
        let states = random(5, 4, 9);
        let actions = random(5, 3, 10);
        let targets = random(5, 1, 11).column(0).to_owned();
        let group = || RegressionGroup {
            policy: &w,
            states: states.view(),
            actions: actions.view(),
            targets: &targets,
        };
        let (_, grad) = q.regression(&[group()]).unwrap();
        fd_check(&q, &grad.flatten(), |p| p.regression(&[group()]).unwrap().0);
    }

    #[test]
    fn critic_action_gradient_matches_finite_differences() {
        let c = Critic::init(3, 2, &[7, 5], true, &mut rng(12));
        let s = random(4, 3, 13);
        let a = random(4, 2, 14);
        let (v, ga) = c.value_and_action_grad(s.view(), a.view()).unwrap();
        assert_eq!(v, c.eval(s.view(), a.view(), QMode::Q1).unwrap());
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..2 {
                let mut ap = a.clone();
                ap[[i, j]] += h;
                let up = c.eval(s.view(), ap.view(), QMode::Q1).unwrap()[i];
                ap[[i, j]] -= 2.0 * h;
                let down = c.eval(s.view(), ap.view(), QMode::Q1).unwrap()[i];
                let fd = (up - down) / (2.0 * h);
                assert!((fd - ga[[i, j]]).abs() / fd.abs().max(1e-4) < 1e-5);
            }
        }
    }

    #[test]
    fn twin_heads_diverge_after_training_on_random_data() {
        let mut c = Critic::init(3, 2, &[16, 16], true, &mut rng(20));
        let mut opt = crate::nn::Adam::new(&c, crate::nn::AdamConfig::default());
        let s = random(32, 3, 21);
        let a = random(32, 2, 22);
        let y = random(32, 1, 23).column(0).to_owned();
        let (_, g) = c.regression(s.view(), a.view(), &y).unwrap();
        opt.step(&mut c, &g).unwrap();
        assert_ne!(c.heads()[0], c.heads()[1]);
        assert_ne!(
            c.eval(s.view(), a.view(), QMode::Q1).unwrap(),
            c.eval(s.view(), a.view(), QMode::Q2).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn pevfa_is_invariant_to_column_permutations(seed in 0u64..10_000) {
            let q = PeVfa::init(&shape(), &mut rng(seed)).unwrap();
            let mut r = rng(seed ^ 0xf00d);
            let w = PolicyRepresentation::init(6, 3, &mut r);
            let mut perm: Vec<usize> = (0..3).collect();
            perm.shuffle(&mut r);
            let mut permuted = w.clone();
            for (dst, &src) in perm.iter().enumerate() {
                permuted.set_column(dst, w.column(src));
            }
            let states = random(8, 4, seed);
            let actions = random(8, 3, seed + 1);
            prop_assert_eq!(q.encode_policy(&w).unwrap(), q.encode_policy(&permuted).unwrap());
            prop_assert_eq!(
                q.head_values(states.view(), actions.view(), &w).unwrap(),
                q.head_values(states.view(), actions.view(), &permuted).unwrap()
            );
        }
    }
}
