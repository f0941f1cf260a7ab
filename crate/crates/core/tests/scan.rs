use ismrnn::mamba::{ssm_scan, ScanDims, ScanInputs, ScanStrategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    dims: ScanDims,
    u: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

impl Instance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let dims = ScanDims {
            batch: rng.random_range(1..=3),
            len: rng.random_range(1..=32),
            inner: rng.random_range(1..=8),
            state: rng.random_range(1..=4),
        };
        let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
        let (bl, e, n) = (dims.batch * dims.len, dims.inner, dims.state);
        Self {
            dims,
            u: v(bl * e, -2.0, 2.0),
            delta: v(bl * e, 1e-3, 1.0),
            a: v(e * n, -4.0, -0.05),
            b: v(bl * n, -1.0, 1.0),
            c: v(bl * n, -1.0, 1.0),
            d: v(e, -1.0, 1.0),
        }
    }

    fn inputs(&self) -> ScanInputs<'_> {
        ScanInputs {
            u: &self.u,
            delta: &self.delta,
            a: &self.a,
            b: &self.b,
            c: &self.c,
            d_skip: &self.d,
        }
    }

    /// Straight transcription of the recurrence, one step at a time.
    fn naive(&self) -> Vec<f64> {
        let ScanDims { batch, len, inner, state } = self.dims;
        let mut y = vec![0.0; batch * len * inner];
        for bi in 0..batch {
            for e in 0..inner {
                let mut h = vec![0.0; state];
                for t in 0..len {
                    let i = (bi * len + t) * inner + e;
                    let row = (bi * len + t) * state;
                    let mut out = self.d[e] * self.u[i];
                    for n in 0..state {
                        let a_bar = (self.delta[i] * self.a[e * state + n]).exp();
                        let b_bar = self.delta[i] * self.b[row + n];
                        h[n] = a_bar * h[n] + b_bar * self.u[i];
                        out += self.c[row + n] * h[n];
                    }
                    y[i] = out;
                }
            }
        }
        y
    }
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max) / scale
}

#[test]
fn both_strategies_match_naive_loop_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..100 {
        let inst = Instance::random(&mut rng);
        let want = inst.naive();
        for strategy in [ScanStrategy::Sequential, ScanStrategy::Associative] {
            let (y, _) = ssm_scan(inst.dims, inst.inputs(), strategy).unwrap();
            let err = rel_err(&y, &want);
            assert!(err <= 1e-12, "instance {k} {strategy:?}: {err:e}");
        }
    }
}

#[test]
fn scan_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inst = loop {
        let i = Instance::random(&mut rng);
        if i.dims.batch == 1 && i.dims.len >= 8 {
            break i;
        }
    };
    let ScanDims { len, inner, state, .. } = inst.dims;
    let (full, _) = ssm_scan(inst.dims, inst.inputs(), ScanStrategy::Sequential).unwrap();
    for t in 1..=len {
        let dims = ScanDims { len: t, ..inst.dims };
        let cut = ScanInputs {
            u: &inst.u[..t * inner],
            delta: &inst.delta[..t * inner],
            a: &inst.a,
            b: &inst.b[..t * state],
            c: &inst.c[..t * state],
            d_skip: &inst.d,
        };
        let (y, _) = ssm_scan(dims, cut, ScanStrategy::Sequential).unwrap();
        assert_eq!(&y[..], &full[..t * inner]);
    }
}

#[test]
fn decays_are_contractive_for_negative_a() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let inst = Instance::random(&mut rng);
        let n = inst.dims.state;
        for (i, dt) in inst.delta.iter().enumerate() {
            let e = i % inst.dims.inner;
            for a in &inst.a[e * n..(e + 1) * n] {
                assert!((dt * a).exp() < 1.0);
            }
        }
    }
}

#[test]
fn single_step_closed_form() {
    let dims = ScanDims {
        batch: 1,
        len: 1,
        inner: 1,
        state: 2,
    };
    let inputs = ScanInputs {
        u: &[1.5],
        delta: &[0.2],
        a: &[-1.0, -2.0],
        b: &[0.5, -1.0],
        c: &[2.0, 3.0],
        d_skip: &[0.25],
    };
    let (y, states) = ssm_scan(dims, inputs, ScanStrategy::Sequential).unwrap();
    let h = [0.2 * 0.5 * 1.5, 0.2 * -1.0 * 1.5];
    assert_eq!(states, h);
    assert!((y[0] - (2.0 * h[0] + 3.0 * h[1] + 0.25 * 1.5)).abs() < 1e-15);
}

#[test]
fn non_positive_step_is_rejected() {
    let dims = ScanDims {
        batch: 1,
        len: 2,
        inner: 1,
        state: 1,
    };
    let inputs = ScanInputs {
        u: &[1.0, 1.0],
        delta: &[0.1, 0.0],
        a: &[-1.0],
        b: &[1.0, 1.0],
        c: &[1.0, 1.0],
        d_skip: &[0.0],
    };
    let err = ssm_scan(dims, inputs, ScanStrategy::Associative).unwrap_err();
    assert_eq!(err.kind(), ismrnn::ErrorKind::Numeric);
}
