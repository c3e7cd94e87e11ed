//! Gradient checks and algebraic properties of every graph primitive.

use neucore::diffcore::{
    forward_backward, grad_check_report, DiffError, Graph, NamedTensors, ParameterSet, Program, ProgramOutput, Scalar,
    Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRIMITIVES: &[&str] = &[
    "matmul", "transpose", "reshape", "add", "sub", "mul", "div", "scale", "neg", "offset", "powf", "sigmoid", "tanh",
    "exp", "log", "log_sigmoid", "sum_axis", "mean_axis", "var_axis", "sum_all", "mean_all", "softmax", "log_softmax",
    "concat", "slice", "gather", "linear", "silu", "standardize", "l2_normalize", "broadcast_add", "broadcast_mul",
];

/// `Σ w ⊙ op(x, y)` with fixed random weights `w`.
struct PrimitiveProgram {
    op: &'static str,
    seed: u64,
}

fn weights<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

impl Program for PrimitiveProgram {
    fn build<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<ProgramOutput, DiffError> {
        let x = g.param("x")?; // [3, 4]
        let y = g.param("y")?; // [3, 4], positive
        let out: Var = match self.op {
            "matmul" => {
                let yt = g.transpose(y)?;
                g.matmul(x, yt)?
            }
            "transpose" => g.transpose(x)?,
            "reshape" => g.reshape(x, &[2, 6])?,
            "add" => g.add(x, y)?,
            "sub" => g.sub(x, y)?,
            "mul" => g.mul(x, y)?,
            "div" => g.div(x, y)?,
            "scale" => g.scale(x, -1.7)?,
            "neg" => g.neg(x)?,
            "offset" => g.offset(x, 0.3)?,
            "powf" => g.powf(y, 1.5)?,
            "sigmoid" => g.sigmoid(x)?,
            "tanh" => g.tanh(x)?,
            "exp" => g.exp(x)?,
            "log" => g.log(y)?,
            "log_sigmoid" => g.log_sigmoid(x)?,
            "sum_axis" => g.sum_axis(x, 1)?,
            "mean_axis" => g.mean_axis(x, 0)?,
            "var_axis" => g.var_axis(x, 1)?,
            "sum_all" => g.sum_all(x)?,
            "mean_all" => g.mean_all(x)?,
            "softmax" => g.softmax(x, 1)?,
            "log_softmax" => g.log_softmax(x, 0)?,
            "concat" => g.concat(&[x, y], 0)?,
            "slice" => g.slice(x, 1, 1, 2)?,
            "gather" => g.gather(x, &[2, 0, 2])?,
            "linear" => g.linear(x, "lin")?,
            "silu" => g.silu(x)?,
            "standardize" => g.standardize(x, 1e-5)?,
            "l2_normalize" => g.l2_normalize(x, 1e-12)?,
            "broadcast_add" => {
                let b = g.param("b")?; // [1, 4]
                g.add(x, b)?
            }
            "broadcast_mul" => {
                let b = g.param("c")?; // [3, 1]
                g.mul(x, b)?
            }
            other => panic!("unknown primitive {other}"),
        };
        let w = g.constant(weights(g.shape(out), self.seed))?;
        let p = g.mul(out, w)?;
        let loss = g.sum_all(p)?;
        Ok(ProgramOutput::loss(loss))
    }
}

fn params(seed: u64) -> ParameterSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize], lo: f64, hi: f64| {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_f64(shape, &v).unwrap()
    };
    let mut ps = ParameterSet::new();
    ps.insert("x", t(&[3, 4], -2.0, 2.0));
    ps.insert("y", t(&[3, 4], 0.5, 2.0));
    ps.insert("b", t(&[1, 4], -1.0, 1.0));
    ps.insert("c", t(&[3, 1], -1.0, 1.0));
    ps.insert("lin.w", t(&[4, 5], -1.0, 1.0));
    ps.insert("lin.b", t(&[5], -1.0, 1.0));
    ps
}

#[test]
fn every_primitive_passes_grad_check_at_ten_points() {
    for op in PRIMITIVES {
        for seed in 0..10 {
            let r = grad_check_report(&PrimitiveProgram { op, seed }, &NamedTensors::new(), &params(seed), 1e-6).unwrap();
            assert!(r.max_rel_error <= 1e-3, "{op} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn forward_backward_is_bit_deterministic() {
    for op in PRIMITIVES {
        let ps = params(3).convert::<f32>();
        let a = forward_backward(&PrimitiveProgram { op, seed: 3 }, &NamedTensors::new(), &ps).unwrap();
        let b = forward_backward(&PrimitiveProgram { op, seed: 3 }, &NamedTensors::new(), &ps).unwrap();
        assert_eq!(a.0, b.0, "{op}");
        assert_eq!(a.1, b.1, "{op}");
    }
}

/// `a·f + b·g` for two primitive programs.
struct Combo {
    f: PrimitiveProgram,
    g: PrimitiveProgram,
    a: f64,
    b: f64,
}

impl Program for Combo {
    fn build<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<ProgramOutput, DiffError> {
        let lf = self.f.build(g)?.loss;
        let lg = self.g.build(g)?.loss;
        let sf = g.scale(lf, self.a)?;
        let sg = g.scale(lg, self.b)?;
        Ok(ProgramOutput::loss(g.add(sf, sg)?))
    }
}

fn row_sums(t: &Tensor<f64>, cols: usize) -> Vec<f64> {
    t.data().chunks(cols).map(|r| r.iter().sum()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_linear_in_programs(
        fi in 0..PRIMITIVES.len(),
        gi in 0..PRIMITIVES.len(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let ps = params(seed);
        let pf = PrimitiveProgram { op: PRIMITIVES[fi], seed };
        let pg = PrimitiveProgram { op: PRIMITIVES[gi], seed: seed + 1 };
        let (_, gf) = forward_backward(&pf, &NamedTensors::new(), &ps).unwrap();
        let (_, gg) = forward_backward(&pg, &NamedTensors::new(), &ps).unwrap();
        let combo = Combo { f: PrimitiveProgram { op: PRIMITIVES[fi], seed }, g: PrimitiveProgram { op: PRIMITIVES[gi], seed: seed + 1 }, a, b };
        let (_, gc) = forward_backward(&combo, &NamedTensors::new(), &ps).unwrap();
        for (path, t) in gc.iter() {
            let (x, y) = (gf.get(path).unwrap(), gg.get(path).unwrap());
            for i in 0..t.len() {
                let expect = a * x.data()[i] + b * y.data()[i];
                prop_assert!((t.data()[i] - expect).abs() <= 1e-5 * expect.abs().max(1.0), "{path}[{i}]");
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        v in prop::collection::vec(-30.0f64..30.0, 12),
        c in -50.0f64..50.0,
    ) {
        let ps = ParameterSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::from_f64(&[3, 4], &v).unwrap()).unwrap();
        let xs = g.offset(x, c).unwrap();
        let s = g.softmax(x, 1).unwrap();
        let t = g.softmax(xs, 1).unwrap();
        for r in row_sums(g.value(s), 4) {
            prop_assert!((r - 1.0).abs() <= 1e-6);
        }
        prop_assert!(g.value(s).max_abs_diff(g.value(t)) <= 1e-6);
    }
}
