//! Central finite-difference gradients and the audit harness that compares
//! them against tape backward passes.
//!
//! The differences here are computed by plain re-evaluation of the loss and
//! never touch the tape's reverse pass, so the two routes stay independent.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{NetConfig, Network, ParameterStore};
use crate::region::{GradEntry, GradientMap};
use crate::tape::{Activation, LossKind, LossTarget};
use crate::tensor::Tensor;

/// Central differences (f(θ+h) − f(θ−h)) / 2h for every parameter entry.
/// The store is restored bit-exactly after each probe.
pub fn finite_difference_gradient<F>(
    store: &mut ParameterStore,
    f: F,
    h: f64,
) -> Result<GradientMap>
where
    F: Fn(&ParameterStore) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut entries = Vec::with_capacity(store.len());
    for p in 0..store.len() {
        let (rows, cols) = store.param(p).value.shape();
        let region = store.param(p).region;
        let mut grad = vec![0.0; rows * cols];
        for (j, g) in grad.iter_mut().enumerate() {
            let original = store.param(p).value.data()[j];
            store.param_mut(p).value.data_mut()[j] = original + h;
            let plus = f(store)?;
            store.param_mut(p).value.data_mut()[j] = original - h;
            let minus = f(store)?;
            store.param_mut(p).value.data_mut()[j] = original;
            *g = (plus - minus) / (2.0 * h);
        }
        entries.push(GradEntry {
            region,
            grad: Tensor::from_raw(rows, cols, grad),
        });
    }
    Ok(GradientMap::new(entries))
}

/// Entries where both routes are below this magnitude are compared
/// absolutely: with h = 1e-5 the central difference carries an absolute
/// roundoff floor near 1e-11, so relative comparison is meaningless there.
pub const NEAR_ZERO: f64 = 3e-6;

/// Worst observed deviation in one audit.
#[derive(Debug, Clone, Copy)]
pub struct AuditReport {
    pub networks: usize,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error_near_zero: f64,
}

impl AuditReport {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel_error <= rel_tol && self.max_abs_error_near_zero <= abs_tol
    }

    pub(crate) fn observe(&mut self, analytic: f64, numeric: f64) {
        self.entries_checked += 1;
        if analytic.abs() < NEAR_ZERO && numeric.abs() < NEAR_ZERO {
            self.max_abs_error_near_zero = self
                .max_abs_error_near_zero
                .max((analytic - numeric).abs());
        } else {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            self.max_rel_error = self.max_rel_error.max(rel);
        }
    }
}

/// Compares backward gradients against central differences on `networks`
/// randomly drawn small networks and batches. The drawn networks use the
/// tanh activation: finite differences straddle the relu kink whenever a
/// pre-activation sits within h of zero, which says nothing about the
/// backward pass (relu is pinned by exact-value unit tests instead).
pub fn audit_random_networks(networks: usize, seed: u64, h: f64) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AuditReport {
        networks,
        entries_checked: 0,
        max_rel_error: 0.0,
        max_abs_error_near_zero: 0.0,
    };

    for _ in 0..networks {
        let cfg = NetConfig {
            d_lid: rng.gen_range(2..=5),
            d_img: rng.gen_range(2..=5),
            enc_widths: vec![rng.gen_range(2..=4)],
            d_fuse: rng.gen_range(2..=4),
            trunk_widths: vec![rng.gen_range(2..=4), rng.gen_range(2..=4)],
            k_classes: rng.gen_range(2..=4),
            g_cells: rng.gen_range(1..=3),
            activation: Activation::Tanh,
            init_seed: rng.gen(),
        };
        let mut net = Network::build(&cfg)?;
        let batch = rng.gen_range(1..=3usize);
        let x_lid = random_tensor(&mut rng, batch, cfg.d_lid);
        let x_img = random_tensor(&mut rng, batch, cfg.d_img);
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..cfg.k_classes)).collect();
        let masks = random_binary_tensor(&mut rng, batch, cfg.g_cells);
        let (w_det, w_seg) = (rng.gen_range(0.25..2.0), rng.gen_range(0.25..2.0));

        let loss_of = {
            let topo = net.topology().clone();
            let x_lid = x_lid.clone();
            let x_img = x_img.clone();
            let labels = labels.clone();
            let masks = masks.clone();
            move |store: &ParameterStore| -> Result<f64> {
                let pass = topo.forward(store, &x_lid, &x_img)?;
                let mut tape = pass.tape;
                let l_det = tape.compute_loss(
                    LossKind::SoftmaxCe,
                    pass.det_logits,
                    LossTarget::Classes(labels.clone()),
                    &vec![1.0; labels.len()],
                )?;
                let l_seg = tape.compute_loss(
                    LossKind::SigmoidBce,
                    pass.seg_logits,
                    LossTarget::Values(masks.clone()),
                    &vec![1.0; labels.len()],
                )?;
                let total = tape.add_scaled(l_det, w_det, l_seg, w_seg)?;
                tape.value(total).scalar_value()
            }
        };

        // Analytic route: one forward, one backward.
        let analytic = {
            let pass = net.forward(&x_lid, &x_img)?;
            let mut tape = pass.tape;
            let l_det = tape.compute_loss(
                LossKind::SoftmaxCe,
                pass.det_logits,
                LossTarget::Classes(labels.clone()),
                &vec![1.0; batch],
            )?;
            let l_seg = tape.compute_loss(
                LossKind::SigmoidBce,
                pass.seg_logits,
                LossTarget::Values(masks.clone()),
                &vec![1.0; batch],
            )?;
            let total = tape.add_scaled(l_det, w_det, l_seg, w_seg)?;
            tape.backward(total)?
        };

        let numeric = finite_difference_gradient(net.store_mut(), &loss_of, h)?;

        for (a, n) in analytic.entries().iter().zip(numeric.entries()) {
            for (&ga, &gn) in a.grad.data().iter().zip(n.grad.data()) {
                report.observe(ga, gn);
            }
        }
    }
    Ok(report)
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::from_raw(rows, cols, data)
}

fn random_binary_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_raw(rows, cols, data)
}
