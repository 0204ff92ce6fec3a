use super::{normalize_causal, GenAttention, GenAux, StackShape};
use crate::params::{Bound, ParamStore};
use crate::tensor::{RngStream, Tape, Tensor, TensorError, Var};
use crate::{Error, Result, Scalar};

/// Width of the sinusoidal timestep embedding fed to the noise predictor.
pub const TIME_DIM: usize = 16;

/// Linear β schedule; `alpha[t] = 1 - beta[t]` per step (no cumulative product).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `α_t` for the 1-based step `t`.
    pub fn alpha_at(&self, t: usize, op: &'static str) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(TensorError::Index {
                op,
                index: t,
                bound: self.steps(),
            }
            .into());
        }
        Ok(self.alpha[t - 1])
    }
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("diffusion needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "noise schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let alpha = beta.iter().map(|b| 1.0 - b).collect();
    Ok(NoiseSchedule { beta, alpha })
}

/// `A_t = √α_t · A_0 + √(1 - α_t) · ε`.
pub fn diffusion_forward<T: Scalar>(
    a0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let alpha = sched.alpha_at(t, "diffusion_forward")?;
    same_shape(a0, eps, "diffusion_forward")?;
    let (sa, sn) = (T::of(alpha.sqrt()), T::of((1.0 - alpha).sqrt()));
    let data = a0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &e)| sa * a + sn * e)
        .collect();
    Ok(Tensor::new(a0.shape().to_vec(), data)?)
}

/// `A_{t-1} = (A_t - √(1 - α_t) · ε̂) / √α_t`.
pub fn diffusion_reverse_step<T: Scalar>(
    a_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let alpha = sched.alpha_at(t, "diffusion_reverse_step")?;
    same_shape(a_t, eps_hat, "diffusion_reverse_step")?;
    let (sa, sn) = (T::of(alpha.sqrt()), T::of((1.0 - alpha).sqrt()));
    let data = a_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&a, &e)| (a - sn * e) / sa)
        .collect();
    Ok(Tensor::new(a_t.shape().to_vec(), data)?)
}

/// Differentiable form of [`diffusion_reverse_step`].
pub fn reverse_step_var<T: Scalar>(
    tape: &mut Tape<T>,
    a_t: Var,
    eps_hat: Var,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let alpha = sched.alpha_at(t, "diffusion_reverse_step")?;
    let inv = 1.0 / alpha.sqrt();
    Ok(tape.axpby(a_t, eps_hat, T::of(inv), T::of(-(1.0 - alpha).sqrt() * inv))?)
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Sinusoidal embedding of a timestep: `[sin(t·f_i)..., cos(t·f_i)...]`
/// with `f_i = 10000^(-i / (TIME_DIM/2))`.
pub fn time_embedding(t: usize) -> [f64; TIME_DIM] {
    let half = TIME_DIM / 2;
    let mut out = [0.0; TIME_DIM];
    for i in 0..half {
        let f = 10000f64.powf(-(i as f64) / half as f64);
        out[i] = (t as f64 * f).sin();
        out[half + i] = (t as f64 * f).cos();
    }
    out
}

fn time_rows<T: Scalar>(ts: &[usize]) -> Tensor<T> {
    let data: Vec<f64> = ts.iter().flat_map(|&t| time_embedding(t)).collect();
    Tensor::from_f64(vec![ts.len(), TIME_DIM], &data).expect("time rows")
}

pub fn init_diffusion<T: Scalar>(
    store: &mut ParamStore<T>,
    d_h: usize,
    shape: StackShape,
    hidden: usize,
    rng: &mut RngStream,
) {
    let p = shape.per_sample();
    store.init_uniform("diff.w_a", &[p, hidden], 1.0 / (p as f64).sqrt(), rng);
    store.init_uniform("diff.w_h", &[d_h, hidden], 1.0 / (d_h as f64).sqrt(), rng);
    store.init_uniform("diff.w_t", &[TIME_DIM, hidden], 1.0 / (TIME_DIM as f64).sqrt(), rng);
    store.init_zeros("diff.b1", &[hidden]);
    store.init_uniform("diff.w_out", &[hidden, p], 1.0 / (hidden as f64).sqrt(), rng);
    store.init_zeros("diff.b_out", &[p]);
}

/// Predictor body given the precomputed `h_g · W_h` term.
///
/// The weight on the concatenation `[vec(A_t), h_g, emb(t)]` is stored as
/// three blocks so the conditioning term can be reused across steps.
fn predict_with_cond<T: Scalar>(tape: &mut Tape<T>, a_t: Var, cond: Var, temb: Var, p: &Bound) -> Result<Var> {
    let dims = tape.shape(a_t).to_vec();
    let flat = tape.reshape(a_t, vec![dims[0], dims[1..].iter().product()])?;
    let hid = tape.linear(flat, p.get("diff.w_a")?, Some(p.get("diff.b1")?))?;
    let hid = tape.add(hid, cond)?;
    let tw = tape.linear(temb, p.get("diff.w_t")?, None)?;
    let hid = tape.add(hid, tw)?;
    let hid = tape.gelu(hid);
    let out = tape.linear(hid, p.get("diff.w_out")?, Some(p.get("diff.b_out")?))?;
    Ok(tape.reshape(out, dims)?)
}

/// `ε̂ = f(A_t, h_g, t)`: a two-layer GELU network on the flattened stack
/// concatenated with `h_g` and the timestep embedding. `ts` holds one step
/// per batch row, or a single step shared by all rows.
pub fn predict_noise<T: Scalar>(tape: &mut Tape<T>, a_t: Var, h_g: Var, ts: &[usize], p: &Bound) -> Result<Var> {
    let cond = tape.linear(h_g, p.get("diff.w_h")?, None)?;
    let temb = tape.constant(time_rows(ts));
    predict_with_cond(tape, a_t, cond, temb, p)
}

/// Reverse chain from `A_T ~ N(0, I)` down to the closing formula
/// `A_gen = A_1 - ε̂_1 · √(1 - α_1)`, then causal softmax.
pub fn generate_attention_diffusion<T: Scalar>(
    tape: &mut Tape<T>,
    h_g: Var,
    sched: &NoiseSchedule,
    p: &Bound,
    rng: &mut RngStream,
    shape: StackShape,
) -> Result<GenAttention> {
    let batch = tape.shape(h_g)[0];
    let mut a = tape.constant(Tensor::randn(shape.dims(batch), rng));
    let cond = tape.linear(h_g, p.get("diff.w_h")?, None)?;
    let steps = sched.steps();
    let mut eps_hat = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let temb = tape.constant(time_rows(&[t]));
        let e = predict_with_cond(tape, a, cond, temb, p)?;
        eps_hat.push(e);
        a = if t > 1 {
            reverse_step_var(tape, a, e, t, sched)?
        } else {
            let c = (1.0 - sched.alpha_at(1, "diffusion closing step")?).sqrt();
            tape.axpby(a, e, T::one(), T::of(-c))?
        };
        if !tape.value(a).is_finite() {
            return Err(Error::Numeric(format!("diffusion state non-finite at step {t}")));
        }
    }
    let normalized = normalize_causal(tape, a)?;
    Ok(GenAttention {
        logits: a,
        normalized,
        aux: GenAux::Diffusion { eps_hat },
    })
}

/// Mean squared error over all entries.
pub fn diffusion_loss<T: Scalar>(tape: &mut Tape<T>, eps: Var, eps_hat: Var) -> Result<Var> {
    if tape.shape(eps) != tape.shape(eps_hat) {
        return Err(TensorError::Shape {
            op: "diffusion_loss",
            lhs: tape.shape(eps).to_vec(),
            rhs: tape.shape(eps_hat).to_vec(),
        }
        .into());
    }
    let diff = tape.sub(eps_hat, eps)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Noise-prediction loss at one uniformly drawn step per batch row, with
/// `A_0 = 0` so that `A_t = √(1 - α_t) · ε`.
pub fn diffusion_training_loss<T: Scalar>(
    tape: &mut Tape<T>,
    h_g: Var,
    sched: &NoiseSchedule,
    p: &Bound,
    shape: StackShape,
    rng: &mut RngStream,
) -> Result<Var> {
    let batch = tape.shape(h_g)[0];
    let ts: Vec<usize> = (0..batch).map(|_| 1 + rng.below(sched.steps())).collect();
    let eps = Tensor::<T>::randn(shape.dims(batch), rng);
    let per = shape.per_sample();
    let mut a_t = eps.clone();
    for (row, &t) in a_t.data_mut().chunks_mut(per).zip(&ts) {
        let c = T::of((1.0 - sched.alpha_at(t, "diffusion_training_loss")?).sqrt());
        row.iter_mut().for_each(|x| *x *= c);
    }
    let a_t = tape.constant(a_t);
    let eps = tape.constant(eps);
    let eps_hat = predict_noise(tape, a_t, h_g, &ts, p)?;
    diffusion_loss(tape, eps, eps_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::check_normalized;

    const SHAPE: StackShape = StackShape {
        layers: 1,
        heads: 1,
        n: 3,
    };

    fn t1(x: f64) -> Tensor<f64> {
        Tensor::from_f64(vec![1, 1], &[x]).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = build_schedule(4, 0.1, 0.4).unwrap();
        for (got, want) in s.beta.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((got - want).abs() < 1e-15);
        }
        for (got, want) in s.alpha.iter().zip([0.9, 0.8, 0.7, 0.6]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(build_schedule(1, 0.3, 0.5).unwrap().beta, vec![0.3]);
        let d = build_schedule(50, 1e-4, 0.02).unwrap();
        assert_eq!(d.steps(), 50);
        assert_eq!(d.beta[0], 1e-4);
        assert!((d.beta[49] - 0.02).abs() < 1e-15);
        assert!(d.beta.windows(2).all(|w| w[0] < w[1]));
        assert!(d.alpha.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(3, 0.3, 0.2).is_err());
        assert!(build_schedule(3, 0.0, 0.2).is_err());
        assert!(build_schedule(3, 0.1, 1.0).is_err());
    }

    fn sched_with_alpha(alpha: f64) -> NoiseSchedule {
        NoiseSchedule {
            beta: vec![1.0 - alpha],
            alpha: vec![alpha],
        }
    }

    #[test]
    fn forward_examples() {
        let s = sched_with_alpha(0.75);
        let a = diffusion_forward(&t1(2.0), 1, &t1(1.0), &s).unwrap();
        let want = 0.75f64.sqrt() * 2.0 + 0.5;
        assert!((a.item().unwrap() - want).abs() < 1e-15);
        assert!((a.item().unwrap() - 2.2321).abs() < 1e-4);
        let noiseless = diffusion_forward(&t1(2.0), 1, &t1(0.0), &s).unwrap();
        assert_eq!(noiseless.item().unwrap(), 0.75f64.sqrt() * 2.0);
        let zero_init = diffusion_forward(&t1(0.0), 1, &t1(3.0), &s).unwrap();
        assert_eq!(zero_init.item().unwrap(), 0.5 * 3.0);
        assert!(diffusion_forward(&t1(0.0), 2, &t1(0.0), &s).is_err());
        assert!(diffusion_forward(&t1(0.0), 0, &t1(0.0), &s).is_err());
    }

    #[test]
    fn reverse_examples() {
        let s = sched_with_alpha(0.75);
        let a = diffusion_reverse_step(&t1(2.2321), &t1(1.0), 1, &s).unwrap();
        assert!((a.item().unwrap() - 2.0).abs() < 1e-4);
        let z = diffusion_reverse_step(&t1(1.5), &t1(0.0), 1, &s).unwrap();
        assert_eq!(z.item().unwrap(), 1.5 / 0.75f64.sqrt());
    }

    #[test]
    fn reverse_inverts_forward_at_every_step() {
        let s = build_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = RngStream::new(1);
        let a0 = Tensor::<f64>::randn(vec![2, 4, 4], &mut rng);
        for t in 1..=50 {
            let eps = Tensor::randn(vec![2, 4, 4], &mut rng);
            let at = diffusion_forward(&a0, t, &eps, &s).unwrap();
            let back = diffusion_reverse_step(&at, &eps, t, &s).unwrap();
            assert!(back.max_abs_diff(&a0).unwrap() <= 1e-12);
        }
    }

    fn store(seed: u64) -> ParamStore<f64> {
        let mut st = ParamStore::new();
        init_diffusion(&mut st, 4, SHAPE, 8, &mut RngStream::new(seed));
        st
    }

    #[test]
    fn predictor_shape_and_affine_collapse() {
        let mut st = store(2);
        for n in ["diff.w_a", "diff.w_h", "diff.w_t", "diff.w_out"] {
            st.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let bias: Vec<f64> = (0..9).map(|i| i as f64).collect();
        st.insert("diff.b_out", Tensor::from_f64(vec![9], &bias).unwrap());
        let mut tape = Tape::new();
        let p = st.bind(&mut tape, false);
        let mut rng = RngStream::new(3);
        let a = tape.constant(Tensor::randn(SHAPE.dims(2), &mut rng));
        let h = tape.constant(Tensor::randn(vec![2, 4], &mut rng));
        let e = predict_noise(&mut tape, a, h, &[1, 3], &p).unwrap();
        assert_eq!(tape.shape(e), tape.shape(a));
        let out = tape.value(e).data();
        assert_eq!(&out[..9], &bias[..]);
        assert_eq!(&out[9..], &bias[..]);
    }

    fn generate(st: &ParamStore<f64>, sched: &NoiseSchedule, seed: u64) -> (Tensor<f64>, Tensor<f64>, usize) {
        let mut tape = Tape::new();
        let p = st.bind(&mut tape, false);
        let h = tape.constant(Tensor::randn(vec![2, 4], &mut RngStream::new(77)));
        let att = generate_attention_diffusion(&mut tape, h, sched, &p, &mut RngStream::new(seed), SHAPE).unwrap();
        let GenAux::Diffusion { eps_hat } = &att.aux else {
            panic!("missing aux")
        };
        (
            tape.value(att.logits).clone(),
            tape.value(att.normalized).clone(),
            eps_hat.len(),
        )
    }

    #[test]
    fn zero_predictor_unrolls_to_scaled_initial_noise() {
        let mut st = store(4);
        for n in ["diff.w_out", "diff.b_out"] {
            st.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let sched = build_schedule(5, 0.01, 0.2).unwrap();
        let (logits, normalized, steps) = generate(&st, &sched, 11);
        assert_eq!(steps, 5);
        let a_t = Tensor::<f64>::randn(SHAPE.dims(2), &mut RngStream::new(11));
        let denom: f64 = (2..=5).map(|t| sched.alpha[t - 1].sqrt()).product();
        let want = a_t.map(|x| x / denom);
        assert!(logits.max_abs_diff(&want).unwrap() < 1e-12);
        check_normalized(&normalized).unwrap();
    }

    #[test]
    fn single_step_is_the_closing_formula() {
        let st = store(5);
        let sched = build_schedule(1, 0.05, 0.05).unwrap();
        let (logits, _, steps) = generate(&st, &sched, 12);
        assert_eq!(steps, 1);
        let mut tape = Tape::new();
        let p = st.bind(&mut tape, false);
        let h = tape.constant(Tensor::randn(vec![2, 4], &mut RngStream::new(77)));
        let a1 = Tensor::<f64>::randn(SHAPE.dims(2), &mut RngStream::new(12));
        let av = tape.constant(a1.clone());
        let e = predict_noise(&mut tape, av, h, &[1], &p).unwrap();
        let c = 0.05f64.sqrt();
        let want: Vec<f64> = a1
            .data()
            .iter()
            .zip(tape.value(e).data())
            .map(|(a, e)| a - e * c)
            .collect();
        let got = logits.data();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn seeds_control_generation() {
        let st = store(6);
        let sched = build_schedule(3, 1e-4, 0.02).unwrap();
        let (_, a, _) = generate(&st, &sched, 1);
        let (_, b, _) = generate(&st, &sched, 1);
        let (_, c, _) = generate(&st, &sched, 2);
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::<f64>::new();
        let eps = tape.constant(Tensor::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap());
        let hat = tape.param(Tensor::zeros(vec![1, 2]));
        let l = diffusion_loss(&mut tape, eps, hat).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.5);
        tape.backward(l).unwrap();
        // 2 (eps_hat - eps) / count
        assert_eq!(tape.grad(hat).unwrap().data(), &[-1.0, 0.0]);
        let same = diffusion_loss(&mut tape, eps, eps).unwrap();
        assert_eq!(tape.value(same).item().unwrap(), 0.0);
    }

    #[test]
    fn training_loss_is_finite_and_positive() {
        let st = store(7);
        let sched = build_schedule(4, 1e-4, 0.02).unwrap();
        let mut tape = Tape::new();
        let p = st.bind(&mut tape, true);
        let h = tape.constant(Tensor::randn(vec![3, 4], &mut RngStream::new(1)));
        let l = diffusion_training_loss(&mut tape, h, &sched, &p, SHAPE, &mut RngStream::new(2)).unwrap();
        let v = tape.value(l).item().unwrap();
        assert!(v.is_finite() && v > 0.0);
    }
}
