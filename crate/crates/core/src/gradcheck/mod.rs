//! Central finite-difference verification of backward rules.
//!
//! A check treats every tensor in a [`ParamSet`] (inputs included) as a
//! differentiable leaf. The scalar probed is `L = sum_i r_i * y_i` for a fixed
//! random cotangent `r`, evaluated in f64 on the f32 forward output, so the
//! analytic side is a single `backward_from(y, r)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};

mod suite;
pub use suite::{full_suite, micro_model_config, model_case, op_suite, GradCase};

use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Up to `k` coordinates from every tensor.
    PerTensor(usize),
    /// `k` coordinates drawn uniformly from all scalars of all tensors.
    Total(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub eps: f32,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    pub sampling: Sampling,
    pub seed: u64,
}

impl FdOptions {
    /// Per-op defaults: eps 1e-3, tolerance 1e-3.
    pub fn op() -> Self {
        FdOptions { eps: 1e-3, tolerance: 1e-3, floor: 1e-2, sampling: Sampling::PerTensor(24), seed: 0x5eed }
    }

    /// End-to-end model defaults: 50 sampled parameters, tolerance 1e-2.
    pub fn model() -> Self {
        FdOptions { eps: 1e-3, tolerance: 1e-2, floor: 1e-2, sampling: Sampling::Total(50), seed: 0x5eed }
    }
}

#[derive(Clone, Debug)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Coordinate>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn probe(out: &[f32], cotangent: &[f32]) -> f64 {
    out.iter().zip(cotangent).map(|(&y, &r)| y as f64 * r as f64).sum()
}

/// Compares analytic and numeric gradients of `f` with respect to every
/// tensor in `params`.
pub fn check<F>(name: &str, params: &ParamSet, f: F, opts: &FdOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let tape = Tape::new();
    let y = f(&tape, params)?;
    let y_val = y.value();
    if !y_val.is_finite() {
        return Err(Error::Numeric(format!("{name}: forward produced non-finite values")));
    }
    let cotangent: Vec<f32> = (0..y_val.numel()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut analytic = params.clone();
    analytic.zero_grad();
    tape.backward_from(y, &cotangent)?.accumulate_into(&mut analytic)?;
    drop(y_val);
    drop(tape);

    let coords = choose_coordinates(params, opts.sampling, &mut rng);
    // gradient scale per tensor: the largest analytic magnitude in it
    let scale: Vec<f64> = params
        .iter()
        .map(|(id, _)| {
            analytic.get(id).tensor.grad.as_ref().map_or(0.0, |g| g.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64)))
        })
        .collect();
    let mut work = params.clone();
    let mut report =
        GradCheckReport { name: name.into(), tolerance: opts.tolerance, max_rel_err: 0.0, checked: 0, worst: None };
    for (id, index) in coords {
        let base = params.get(id).tensor.data()[index];
        let plus = base + opts.eps;
        let minus = base - opts.eps;
        let eval = |work: &mut ParamSet, v: f32| -> Result<f64> {
            work.get_mut(id).tensor.data_mut()[index] = v;
            let tape = Tape::new();
            let y = f(&tape, work)?;
            let val = y.value();
            Ok(probe(val.data(), &cotangent))
        };
        let lp = eval(&mut work, plus)?;
        let lm = eval(&mut work, minus)?;
        work.get_mut(id).tensor.data_mut()[index] = base;
        let numeric = (lp - lm) / (plus as f64 - minus as f64);
        let a = analytic.get(id).tensor.grad.as_ref().map_or(0.0, |g| g[index] as f64);
        let rel_err = relative_error(a, numeric, scale[id.0].max(opts.floor));
        report.checked += 1;
        if rel_err >= report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst =
                Some(Coordinate { param: params.get(id).name.clone(), index, analytic: a, numeric, rel_err });
        }
    }
    Ok(report)
}

fn choose_coordinates(params: &ParamSet, sampling: Sampling, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    match sampling {
        Sampling::PerTensor(k) => params
            .iter()
            .flat_map(|(id, p)| {
                let n = p.tensor.numel();
                let picks: Vec<usize> = if n <= k { (0..n).collect() } else { sample(rng, n, k).into_vec() };
                picks.into_iter().map(move |i| (id, i))
            })
            .collect(),
        Sampling::Total(k) => {
            let sizes: Vec<(ParamId, usize)> = params.iter().map(|(id, p)| (id, p.tensor.numel())).collect();
            let total: usize = sizes.iter().map(|s| s.1).sum();
            let mut flat = sample(rng, total, k.min(total)).into_vec();
            flat.sort_unstable();
            flat.into_iter()
                .map(|mut i| {
                    for &(id, n) in &sizes {
                        if i < n {
                            return (id, i);
                        }
                        i -= n;
                    }
                    unreachable!("index within total")
                })
                .collect()
        }
    }
}

/// Runs `cases` over [`crate::train::worker_threads`] threads; results come
/// back in input order, paired with the case name.
pub fn run_cases(cases: &[GradCase]) -> Result<Vec<(String, Result<GradCheckReport>)>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(crate::train::worker_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cases.par_iter().map(|c| (c.name.clone(), (c.run)())).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basic::mul;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn square_passes() {
        let mut params = ParamSet::new();
        let s = Shape::new(1, 2, 3, 3).unwrap();
        params.add("x", Tensor::from_vec(s, (0..18).map(|v| v as f32 / 9.0 - 1.0).collect()).unwrap()).unwrap();
        let id = params.id_of("x").unwrap();
        let report = check(
            "square",
            &params,
            |tape, p| {
                let x = tape.param(p, id);
                mul(x, x)
            },
            &FdOptions::op(),
        )
        .unwrap();
        assert_eq!(report.checked, 18);
        assert!(report.passed(), "{report:?}");
    }

    /// `y = x^2` with a backward rule that forgets the factor 2.
    struct BadSquare;

    impl crate::tape::Backward for BadSquare {
        fn name(&self) -> &'static str {
            "bad_square"
        }

        fn backward(&self, ctx: &crate::tape::BackwardCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> {
            let x = ctx.inputs[0].data();
            Ok(vec![Some(x.iter().zip(ctx.grad_out).map(|(x, g)| x * g).collect())])
        }
    }

    #[test]
    fn corrupted_backward_is_named() {
        let mut params = ParamSet::new();
        let s = Shape::new(1, 1, 2, 2).unwrap();
        params.add("x", Tensor::from_vec(s, vec![0.5, -1.0, 0.25, 2.0]).unwrap()).unwrap();
        let id = params.id_of("x").unwrap();
        let case = GradCase::new("bad_square", move || {
            check(
                "bad_square",
                &params,
                |tape, p| {
                    let x = tape.param(p, id);
                    let v = x.value();
                    let y = Tensor::from_vec(v.shape(), v.data().iter().map(|a| a * a).collect())?;
                    Ok(tape.record(y, &[x], BadSquare))
                },
                &FdOptions::op(),
            )
        });
        let results = run_cases(&[case]).unwrap();
        let (name, report) = &results[0];
        let report = report.as_ref().unwrap();
        assert_eq!(name, "bad_square");
        assert!(!report.passed());
        assert!((report.max_rel_err - 0.5).abs() < 1e-2, "{report:?}");
    }

    #[test]
    fn empty_case_list_is_vacuous() {
        assert!(run_cases(&[]).unwrap().is_empty());
    }

    #[test]
    fn total_sampling_draws_exact_count() {
        let mut params = ParamSet::new();
        params.add("a", Tensor::zeros(Shape::new(1, 1, 4, 4).unwrap())).unwrap();
        params.add("b", Tensor::zeros(Shape::new(1, 1, 2, 2).unwrap())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = choose_coordinates(&params, Sampling::Total(10), &mut rng);
        assert_eq!(coords.len(), 10);
        let coords = choose_coordinates(&params, Sampling::Total(100), &mut rng);
        assert_eq!(coords.len(), 20);
    }
}
