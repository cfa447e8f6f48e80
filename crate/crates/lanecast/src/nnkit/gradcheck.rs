//! Finite-difference gradient verification.
//!
//! The analytic side is the f32 backward pass under test. The numeric side
//! replays the recorded graph in f64 (`Graph::eval_f64`) and central-differences
//! through a random linear functional of the output, so probe noise stays far
//! below the tolerance instead of drowning in f32 rounding.
//!
//! Relative error uses a scale-aware floor: coordinates whose gradient is
//! below 0.1% of the tensor's largest gradient are compared against that
//! floor absolutely, since their relative error is dominated by accumulation
//! rounding rather than by the formula under test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::store::{ParamNodes, ParamStore};
use super::tensor::Tensor;
use super::NnError;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference half-step, applied in f64.
    pub eps: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-3,
            tol: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum CoordPlan {
    /// Probe every coordinate of every checked tensor.
    All,
    /// Probe a seeded random subset of coordinates per tensor.
    Sample { per_tensor: usize, seed: u64 },
}

impl CoordPlan {
    fn coords(&self, numel: usize, salt: u64) -> Vec<usize> {
        match self {
            CoordPlan::All => (0..numel).collect(),
            CoordPlan::Sample { per_tensor, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
                let mut out: Vec<usize> =
                    (0..*per_tensor).map(|_| rng.random_range(0..numel)).collect();
                out.sort_unstable();
                out.dedup();
                out
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic
        .abs()
        .max(numeric.abs())
        .max(1e-3 * (1.0 + scale));
    (analytic - numeric).abs() / denom
}

fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Probe<'g, 'a> {
    graph: &'g Graph<'a>,
    out: NodeId,
    weights: Vec<f64>,
}

impl Probe<'_, '_> {
    fn loss_at(&self, leaf: NodeId, values: Vec<f64>) -> Result<f64, NnError> {
        let out = self.graph.eval_f64(self.out, &[(leaf, values)])?;
        Ok(dot_f64(&out, &self.weights))
    }

    /// Max relative error over the chosen coordinates of one leaf.
    fn check_leaf(
        &self,
        leaf: NodeId,
        base: &[f32],
        analytic: Option<&Tensor>,
        plan: &CoordPlan,
        salt: u64,
        cfg: &GradCheck,
    ) -> Result<(usize, f64), NnError> {
        let base: Vec<f64> = base.iter().map(|&v| v as f64).collect();
        let scale = analytic.map_or(0.0, |g| {
            g.data().iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64))
        });
        let coords = plan.coords(base.len(), salt);
        let mut max_err = 0.0f64;
        for &c in &coords {
            let mut plus = base.clone();
            plus[c] += cfg.eps;
            let lp = self.loss_at(leaf, plus)?;
            let mut minus = base.clone();
            minus[c] -= cfg.eps;
            let lm = self.loss_at(leaf, minus)?;
            let numeric = (lp - lm) / (2.0 * cfg.eps);
            let a = analytic.map_or(0.0, |g| g.data()[c] as f64);
            max_err = max_err.max(rel_err(a, numeric, scale));
        }
        Ok((coords.len(), max_err))
    }
}

/// Checks a function of plain tensor inputs. `build` receives one variable
/// node per input and returns the output node (any shape); the check drives
/// backward through a random linear functional of that output.
pub fn check_scalar_fn<F>(
    name: &str,
    inputs: &[Tensor],
    build: F,
    plan: CoordPlan,
    cfg: GradCheck,
) -> Result<GradReport, NnError>
where
    F: Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId, NnError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.var(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6E5E_ED00 ^ name.len() as u64);
    let r = Tensor::randn(g.shape(out), 1.0, &mut rng);
    let weights: Vec<f64> = r.data().iter().map(|&v| v as f64).collect();
    g.backward_seeded(out, r)?;

    let probe = Probe {
        graph: &g,
        out,
        weights,
    };
    let mut checked = 0;
    let mut max_err = 0.0f64;
    for (i, id) in ids.iter().enumerate() {
        let (n, e) = probe.check_leaf(
            *id,
            inputs[i].data(),
            g.grad(*id),
            &plan,
            i as u64,
            &cfg,
        )?;
        checked += n;
        max_err = max_err.max(e);
    }
    Ok(GradReport {
        name: name.to_string(),
        checked,
        max_rel_err: max_err,
        tol: cfg.tol,
    })
}

/// Checks a model forward against its parameter store: one report per
/// trainable parameter. `build` assembles the forward pass from bound
/// parameter nodes and returns the output node.
pub fn check_params<F>(
    store: &ParamStore,
    build: F,
    plan: CoordPlan,
    cfg: GradCheck,
) -> Result<Vec<GradReport>, NnError>
where
    F: for<'b> Fn(&mut Graph<'b>, &ParamNodes) -> Result<NodeId, NnError>,
{
    let mut g = Graph::new();
    let nodes = g.bind(store);
    let out = build(&mut g, &nodes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6E5E_ED01);
    let r = Tensor::randn(g.shape(out), 1.0, &mut rng);
    let weights: Vec<f64> = r.data().iter().map(|&v| v as f64).collect();
    g.backward_seeded(out, r)?;

    let probe = Probe {
        graph: &g,
        out,
        weights,
    };
    let mut reports = Vec::new();
    for (salt, (name, param)) in store.iter().enumerate() {
        if !param.trainable {
            continue;
        }
        let id = nodes.node(name)?;
        let (checked, max_err) = probe.check_leaf(
            id,
            param.value.data(),
            g.grad(id),
            &plan,
            salt as u64,
            &cfg,
        )?;
        reports.push(GradReport {
            name: name.clone(),
            checked,
            max_rel_err: max_err,
            tol: cfg.tol,
        });
    }
    Ok(reports)
}

/// One finite-difference report per autodiff primitive, probed at every
/// coordinate of small random inputs.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradReport>, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GradCheck::default();
    let mut out = Vec::new();
    let mut run = |name: &str,
                   inputs: Vec<Tensor>,
                   build: &dyn Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId, NnError>|
     -> Result<(), NnError> {
        out.push(check_scalar_fn(name, &inputs, build, CoordPlan::All, cfg)?);
        Ok(())
    };

    let t = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, rng);

    run("matmul", vec![t(&[5, 4], &mut rng), t(&[4, 6], &mut rng)], &|g, v| {
        g.matmul(v[0], v[1])
    })?;
    run("add", vec![t(&[3, 4], &mut rng), t(&[3, 4], &mut rng)], &|g, v| {
        g.add(v[0], v[1])
    })?;
    run("sub", vec![t(&[3, 4], &mut rng), t(&[3, 4], &mut rng)], &|g, v| {
        g.sub(v[0], v[1])
    })?;
    run("mul", vec![t(&[3, 4], &mut rng), t(&[3, 4], &mut rng)], &|g, v| {
        g.mul(v[0], v[1])
    })?;
    run("scale", vec![t(&[3, 4], &mut rng)], &|g, v| g.scale(v[0], -1.7))?;
    run(
        "add_row",
        vec![t(&[4, 5], &mut rng), t(&[5], &mut rng)],
        &|g, v| g.add_row(v[0], v[1]),
    )?;
    run(
        "mul_row",
        vec![t(&[4, 5], &mut rng), t(&[5], &mut rng)],
        &|g, v| g.mul_row(v[0], v[1]),
    )?;
    run("gelu", vec![t(&[4, 6], &mut rng)], &|g, v| g.gelu(v[0]))?;
    run("sigmoid", vec![t(&[4, 6], &mut rng)], &|g, v| g.sigmoid(v[0]))?;
    run("softmax_rows", vec![t(&[4, 7], &mut rng)], &|g, v| {
        g.softmax_rows(v[0])
    })?;
    run("layer_norm_rows", vec![t(&[3, 8], &mut rng)], &|g, v| {
        g.layer_norm_rows(v[0], 1e-5)
    })?;
    run("mean_all", vec![t(&[4, 5], &mut rng)], &|g, v| g.mean_all(v[0]))?;
    run("sum_all", vec![t(&[4, 5], &mut rng)], &|g, v| g.sum_all(v[0]))?;
    run("mean_pool_rows", vec![t(&[6, 4], &mut rng)], &|g, v| {
        g.mean_pool_rows(v[0], 3)
    })?;
    run(
        "concat_rows",
        vec![t(&[2, 5], &mut rng), t(&[3, 5], &mut rng)],
        &|g, v| g.concat_rows(v),
    )?;
    run("slice_rows", vec![t(&[5, 4], &mut rng)], &|g, v| {
        g.slice_rows(v[0], 1, 3)
    })?;
    run(
        "concat_cols",
        vec![t(&[3, 2], &mut rng), t(&[3, 4], &mut rng)],
        &|g, v| g.concat_cols(v),
    )?;
    run("slice_cols", vec![t(&[3, 6], &mut rng)], &|g, v| {
        g.slice_cols(v[0], 2, 3)
    })?;
    run("transpose", vec![t(&[3, 5], &mut rng)], &|g, v| g.transpose(v[0]))?;
    run("reshape", vec![t(&[4, 6], &mut rng)], &|g, v| {
        g.reshape(v[0], &[2, 12])
    })?;
    run("gather", vec![t(&[3, 4], &mut rng)], &|g, v| {
        let idx = std::sync::Arc::new(vec![0u32, 5, 5, 11, 7, 2]);
        g.gather(v[0], idx, &[2, 3])
    })?;
    run(
        "mlp_chain",
        vec![
            t(&[3, 6], &mut rng),
            t(&[6, 8], &mut rng),
            t(&[8], &mut rng),
            t(&[8, 2], &mut rng),
        ],
        &|g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, v[3])?;
            let h = g.softmax_rows(h)?;
            g.mean_all(h)
        },
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_finite_difference() {
        for report in primitive_suite(17).unwrap() {
            assert!(
                report.passed(),
                "{}: max rel err {:.3e} over {} coords",
                report.name,
                report.max_rel_err,
                report.checked
            );
        }
    }

    #[test]
    fn rel_err_floor_suppresses_dead_coordinates_only() {
        // both tiny: absorbed by the scale floor
        assert_eq!(rel_err(0.0, 1e-9, 1.0), 1e-9 / 2e-3);
        // genuine disagreement at scale is loud
        assert!(rel_err(1.0, 0.5, 1.0) > 0.3);
    }

    #[test]
    fn check_params_reports_trainable_entries_only() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        store
            .insert("w", Tensor::randn(&[4, 3], 0.5, &mut rng), true)
            .unwrap();
        store
            .insert("frozen", Tensor::randn(&[3], 0.5, &mut rng), false)
            .unwrap();
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let reports = check_params(
            &store,
            |g, p| {
                let xn = g.constant(x.clone());
                let w = p.node("w")?;
                let f = p.node("frozen")?;
                let h = g.matmul(xn, w)?;
                let h = g.add_row(h, f)?;
                g.mean_all(h)
            },
            CoordPlan::All,
            GradCheck::default(),
        )
        .unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].name, "w");
        assert!(reports[0].passed(), "{:?}", reports[0]);
    }
}
