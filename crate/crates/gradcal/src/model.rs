//! Two-branch fusion network with region-tagged parameters.
//!
//! Structure: per-modality linear encoders, column-wise concatenation into
//! a learned fusion layer whose weight is split by source modality, a
//! second fusion linear, a shared trunk whose last weight matrix is the
//! `SharedLast` region, and two linear task heads.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{GradientMap, RegionTag};
use crate::tape::{Activation, NodeId, Tape};
use crate::tensor::Tensor;

/// Widths and seeds describing a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Input width of the first (lidar-like) modality.
    pub d_lid: usize,
    /// Input width of the second (image-like) modality.
    pub d_img: usize,
    /// Hidden widths of each modality encoder; both encoders share this
    /// shape, so they end at the same width.
    pub enc_widths: Vec<usize>,
    /// Output width of the fusion block.
    pub d_fuse: usize,
    /// Shared trunk widths; the last entry is the layer whose weight is
    /// tagged `SharedLast`.
    pub trunk_widths: Vec<usize>,
    /// Detection class count.
    pub k_classes: usize,
    /// Segmentation mask cell count.
    pub g_cells: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d_lid: 64,
            d_img: 16,
            enc_widths: vec![32],
            d_fuse: 16,
            trunk_widths: vec![16, 16],
            k_classes: 8,
            g_cells: 6,
            activation: Activation::Relu,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let widths_ok = self.d_lid >= 1
            && self.d_img >= 1
            && self.d_fuse >= 1
            && !self.enc_widths.is_empty()
            && self.enc_widths.iter().all(|&w| w >= 1)
            && !self.trunk_widths.is_empty()
            && self.trunk_widths.iter().all(|&w| w >= 1);
        if !widths_ok {
            return Err(Error::Config("all widths must be >= 1".into()));
        }
        if self.k_classes < 2 {
            return Err(Error::Config("k_classes must be >= 2".into()));
        }
        if self.g_cells < 1 {
            return Err(Error::Config("g_cells must be >= 1".into()));
        }
        Ok(())
    }

    fn enc_out(&self) -> usize {
        *self.enc_widths.last().expect("validated non-empty")
    }
}

/// One learnable tensor with its name and region.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub region: RegionTag,
    pub value: Tensor,
}

/// All learnable parameters in declaration order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, region: RegionTag, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            region,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn entry_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Binds every parameter onto a tape, in declaration order.
    pub fn bind_all(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.bind_param(p.region, p.value.clone()))
            .collect()
    }
}

/// Outputs of one forward pass; the tape keeps the full graph so multiple
/// losses can be appended and differentiated independently.
pub struct ForwardPass {
    pub tape: Tape,
    pub det_logits: NodeId,
    pub seg_logits: NodeId,
}

/// Index of each layer's parameters inside the store.
#[derive(Debug, Clone)]
struct Layout {
    lid_enc: Vec<(usize, usize)>,
    img_enc: Vec<(usize, usize)>,
    fusion_w_lid: usize,
    fusion_w_img: usize,
    fusion_b: usize,
    fusion2: (usize, usize),
    trunk: Vec<(usize, usize)>,
    head_det: (usize, usize),
    head_seg: (usize, usize),
}

/// The immutable wiring of a network (config plus parameter layout),
/// separable from the store so probes can perturb parameters while the
/// topology stays borrowed.
#[derive(Debug, Clone)]
pub struct Topology {
    cfg: NetConfig,
    layout: Layout,
}

impl Topology {
    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Runs the network on a batch, recording everything on a fresh tape.
    pub fn forward(
        &self,
        store: &ParameterStore,
        x_lid: &Tensor,
        x_img: &Tensor,
    ) -> Result<ForwardPass> {
        if x_lid.rows() != x_img.rows() {
            return Err(Error::shape(
                "forward: batch rows",
                format!("{}x{}", x_lid.rows(), x_lid.cols()),
                format!("{}x{}", x_img.rows(), x_img.cols()),
            ));
        }
        if x_lid.cols() != self.cfg.d_lid || x_img.cols() != self.cfg.d_img {
            return Err(Error::shape(
                "forward: input widths",
                format!("{}+{}", x_lid.cols(), x_img.cols()),
                format!("{}+{}", self.cfg.d_lid, self.cfg.d_img),
            ));
        }

        let mut tape = Tape::new();
        let nodes = store.bind_all(&mut tape);
        let act = self.cfg.activation;

        let mut h_lid = tape.input(x_lid.clone());
        for &(w, b) in &self.layout.lid_enc {
            h_lid = tape.apply_linear(nodes[w], nodes[b], h_lid)?;
            h_lid = tape.apply_activation(act, h_lid);
        }
        let mut h_img = tape.input(x_img.clone());
        for &(w, b) in &self.layout.img_enc {
            h_img = tape.apply_linear(nodes[w], nodes[b], h_img)?;
            h_img = tape.apply_activation(act, h_img);
        }

        // The fusion weight is materialized from its two modality splits so
        // the backward pass hands each split its own gradient block.
        let fusion_w = tape.concat_columns(
            nodes[self.layout.fusion_w_lid],
            nodes[self.layout.fusion_w_img],
        )?;
        let features = tape.concat_columns(h_lid, h_img)?;
        let mut h = tape.apply_linear(fusion_w, nodes[self.layout.fusion_b], features)?;
        h = tape.apply_activation(act, h);
        let (f2w, f2b) = self.layout.fusion2;
        h = tape.apply_linear(nodes[f2w], nodes[f2b], h)?;
        h = tape.apply_activation(act, h);

        for &(w, b) in &self.layout.trunk {
            h = tape.apply_linear(nodes[w], nodes[b], h)?;
            h = tape.apply_activation(act, h);
        }

        let (dw, db) = self.layout.head_det;
        let det_logits = tape.apply_linear(nodes[dw], nodes[db], h)?;
        let (sw, sb) = self.layout.head_seg;
        let seg_logits = tape.apply_linear(nodes[sw], nodes[sb], h)?;
        Ok(ForwardPass {
            tape,
            det_logits,
            seg_logits,
        })
    }
}

/// A network = topology + parameter store.
pub struct Network {
    topo: Topology,
    store: ParameterStore,
}

impl Network {
    /// Builds a network with every parameter (weights and biases) drawn
    /// uniformly at scale 1/sqrt(fan_in), deterministic in
    /// `cfg.init_seed`.
    pub fn build(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParameterStore::new();

        let mut lid_enc = Vec::new();
        let mut d_in = cfg.d_lid;
        for (i, &w) in cfg.enc_widths.iter().enumerate() {
            lid_enc.push(push_linear(
                &mut store,
                &mut rng,
                &format!("lid_enc{i}"),
                RegionTag::LidarBranch,
                w,
                d_in,
                d_in,
            ));
            d_in = w;
        }
        let mut img_enc = Vec::new();
        let mut d_in = cfg.d_img;
        for (i, &w) in cfg.enc_widths.iter().enumerate() {
            img_enc.push(push_linear(
                &mut store,
                &mut rng,
                &format!("img_enc{i}"),
                RegionTag::ImageBranch,
                w,
                d_in,
                d_in,
            ));
            d_in = w;
        }

        let enc_out = cfg.enc_out();
        let fusion_fan_in = 2 * enc_out;
        let fusion_w_lid = store.push(
            "fusion_w_lid",
            RegionTag::FusionLidarSplit,
            random_matrix(&mut rng, cfg.d_fuse, enc_out, fusion_fan_in),
        );
        let fusion_w_img = store.push(
            "fusion_w_img",
            RegionTag::FusionImageSplit,
            random_matrix(&mut rng, cfg.d_fuse, enc_out, fusion_fan_in),
        );
        let fusion_b = store.push(
            "fusion_b",
            RegionTag::FusionRest,
            random_matrix(&mut rng, 1, cfg.d_fuse, fusion_fan_in),
        );
        let fusion2 = push_linear(
            &mut store,
            &mut rng,
            "fusion2",
            RegionTag::SharedTrunk,
            cfg.d_fuse,
            cfg.d_fuse,
            cfg.d_fuse,
        );

        let mut trunk = Vec::new();
        let mut d_in = cfg.d_fuse;
        let last = cfg.trunk_widths.len() - 1;
        for (i, &w) in cfg.trunk_widths.iter().enumerate() {
            // Only the final trunk weight matrix is SharedLast; its bias
            // stays in SharedTrunk so the region norm is one matrix.
            let w_tag = if i == last {
                RegionTag::SharedLast
            } else {
                RegionTag::SharedTrunk
            };
            let w_idx = store.push(
                format!("trunk{i}_w"),
                w_tag,
                random_matrix(&mut rng, w, d_in, d_in),
            );
            let b_idx = store.push(
                format!("trunk{i}_b"),
                RegionTag::SharedTrunk,
                random_matrix(&mut rng, 1, w, d_in),
            );
            trunk.push((w_idx, b_idx));
            d_in = w;
        }

        let head_det = push_linear(
            &mut store,
            &mut rng,
            "head_det",
            RegionTag::HeadDet,
            cfg.k_classes,
            d_in,
            d_in,
        );
        let head_seg = push_linear(
            &mut store,
            &mut rng,
            "head_seg",
            RegionTag::HeadSeg,
            cfg.g_cells,
            d_in,
            d_in,
        );

        let net = Network {
            topo: Topology {
                cfg: cfg.clone(),
                layout: Layout {
                    lid_enc,
                    img_enc,
                    fusion_w_lid,
                    fusion_w_img,
                    fusion_b,
                    fusion2,
                    trunk,
                    head_det,
                    head_seg,
                },
            },
            store,
        };
        net.assert_region_partition();
        Ok(net)
    }

    /// Every parameter carries exactly one tag by construction; this checks
    /// the fusion-seam and shared-last invariants.
    fn assert_region_partition(&self) {
        let enc_out = self.topo.cfg.enc_out();
        let lid = &self.store.param(self.topo.layout.fusion_w_lid);
        let img = &self.store.param(self.topo.layout.fusion_w_img);
        assert_eq!(lid.value.shape(), (self.topo.cfg.d_fuse, enc_out));
        assert_eq!(img.value.shape(), (self.topo.cfg.d_fuse, enc_out));
        assert_eq!(lid.region, RegionTag::FusionLidarSplit);
        assert_eq!(img.region, RegionTag::FusionImageSplit);
        let shared_last: Vec<_> = self
            .store
            .iter()
            .filter(|p| p.region == RegionTag::SharedLast)
            .collect();
        assert_eq!(shared_last.len(), 1, "exactly one SharedLast parameter");
    }

    pub fn config(&self) -> &NetConfig {
        &self.topo.cfg
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Split borrow for probes that perturb parameters while running the
    /// fixed topology.
    pub fn parts_mut(&mut self) -> (&Topology, &mut ParameterStore) {
        (&self.topo, &mut self.store)
    }

    pub fn forward(&self, x_lid: &Tensor, x_img: &Tensor) -> Result<ForwardPass> {
        self.topo.forward(&self.store, x_lid, x_img)
    }

    /// L2 norms of the two fusion-split gradient blocks.
    pub fn fusion_split_norms(&self, gm: &GradientMap) -> Result<(f64, f64)> {
        Ok((
            gm.region_norm(RegionTag::FusionLidarSplit)?,
            gm.region_norm(RegionTag::FusionImageSplit)?,
        ))
    }

    /// Flattened gradient of the last shared trunk weight.
    pub fn shared_last_gradient(&self, gm: &GradientMap) -> Result<Vec<f64>> {
        gm.region_gradient(RegionTag::SharedLast)
    }

    /// Writes all parameters as one JSON document: region tag, shape and
    /// row-major values per parameter. f64 values round-trip exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.to_string(),
            net: self.topo.cfg.clone(),
            params: self
                .store
                .iter()
                .map(|p| CheckpointParam {
                    name: p.name.clone(),
                    region: p.region,
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&doc)
            .map_err(|e| Error::parse(path, format!("serialize checkpoint: {e}")))?;
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(json.as_bytes())
            .and_then(|_| file.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint written by [`Network::save_checkpoint`]. Rebuilds
    /// the topology from the embedded config and verifies every shape.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: CheckpointDoc =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::parse(
                path,
                format!("unsupported checkpoint format {:?}", doc.format),
            ));
        }
        let mut net = Network::build(&doc.net)?;
        if doc.params.len() != net.store.len() {
            return Err(Error::parse(
                path,
                format!(
                    "parameter count {} does not match config ({})",
                    doc.params.len(),
                    net.store.len()
                ),
            ));
        }
        for (i, cp) in doc.params.iter().enumerate() {
            let param = net.store.param_mut(i);
            if param.value.shape() != (cp.rows, cp.cols) || param.region != cp.region {
                return Err(Error::parse(
                    path,
                    format!("parameter {} mismatch against config layout", cp.name),
                ));
            }
            param.value = Tensor::new(cp.rows, cp.cols, cp.data.clone())
                .map_err(|e| Error::parse(path, format!("parameter {}: {e}", cp.name)))?;
        }
        Ok(net)
    }
}

const CHECKPOINT_FORMAT: &str = "gradcal-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    net: NetConfig,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    region: RegionTag,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn push_linear(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    region: RegionTag,
    n_out: usize,
    n_in: usize,
    fan_in: usize,
) -> (usize, usize) {
    let w = store.push(
        format!("{name}_w"),
        region,
        random_matrix(rng, n_out, n_in, fan_in),
    );
    let b = store.push(
        format!("{name}_b"),
        region,
        random_matrix(rng, 1, n_out, fan_in),
    );
    (w, b)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Tensor::from_raw(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{LossKind, LossTarget};

    fn small_cfg() -> NetConfig {
        NetConfig {
            d_lid: 8,
            d_img: 4,
            enc_widths: vec![16],
            d_fuse: 6,
            trunk_widths: vec![5, 4],
            k_classes: 3,
            g_cells: 5,
            activation: Activation::Relu,
            init_seed: 11,
        }
    }

    #[test]
    fn fusion_split_shapes_follow_encoder_width() {
        let net = Network::build(&small_cfg()).unwrap();
        let lid = net.store.param(net.topo.layout.fusion_w_lid);
        let img = net.store.param(net.topo.layout.fusion_w_img);
        assert_eq!(lid.value.shape(), (6, 16));
        assert_eq!(img.value.shape(), (6, 16));
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let a = Network::build(&small_cfg()).unwrap();
        let b = Network::build(&small_cfg()).unwrap();
        for (pa, pb) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.value, pb.value);
        }
        let mut cfg = small_cfg();
        cfg.init_seed = 12;
        let c = Network::build(&cfg).unwrap();
        let differs = a
            .store
            .iter()
            .zip(c.store.iter())
            .any(|(pa, pc)| pa.value != pc.value);
        assert!(differs);
    }

    #[test]
    fn invalid_widths_are_config_errors() {
        let mut cfg = small_cfg();
        cfg.k_classes = 1;
        assert!(Network::build(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.enc_widths = vec![];
        assert!(Network::build(&cfg).is_err());
    }

    #[test]
    fn forward_shapes() {
        let net = Network::build(&small_cfg()).unwrap();
        let x_lid = Tensor::zeros(2, 8);
        let x_img = Tensor::zeros(2, 4);
        let pass = net.forward(&x_lid, &x_img).unwrap();
        assert_eq!(pass.tape.value(pass.det_logits).shape(), (2, 3));
        assert_eq!(pass.tape.value(pass.seg_logits).shape(), (2, 5));
    }

    #[test]
    fn forward_rejects_mismatched_inputs() {
        let net = Network::build(&small_cfg()).unwrap();
        assert!(net.forward(&Tensor::zeros(2, 8), &Tensor::zeros(3, 4)).is_err());
        assert!(net.forward(&Tensor::zeros(2, 7), &Tensor::zeros(2, 4)).is_err());
    }

    #[test]
    fn zero_parameters_give_uniform_det_logits() {
        let mut net = Network::build(&small_cfg()).unwrap();
        for i in 0..net.store.len() {
            let shape = net.store.param(i).value.shape();
            net.store.param_mut(i).value = Tensor::zeros(shape.0, shape.1);
        }
        let x_lid = Tensor::new(2, 8, (0..16).map(|v| v as f64).collect()).unwrap();
        let x_img = Tensor::new(2, 4, (0..8).map(|v| v as f64 - 3.0).collect()).unwrap();
        let pass = net.forward(&x_lid, &x_img).unwrap();
        let mut tape = pass.tape;
        let l = tape
            .compute_loss(
                LossKind::SoftmaxCe,
                pass.det_logits,
                LossTarget::Classes(vec![0, 2]),
                &[1.0, 1.0],
            )
            .unwrap();
        assert!((tape.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zeroed_image_split_makes_image_input_irrelevant() {
        let mut net = Network::build(&small_cfg()).unwrap();
        let idx = net.topo.layout.fusion_w_img;
        let shape = net.store.param(idx).value.shape();
        net.store.param_mut(idx).value = Tensor::zeros(shape.0, shape.1);

        let x_lid = Tensor::new(1, 8, vec![0.3; 8]).unwrap();
        let a = net.forward(&x_lid, &Tensor::zeros(1, 4)).unwrap();
        let b = net
            .forward(&x_lid, &Tensor::new(1, 4, vec![5.0, -2.0, 0.7, 9.0]).unwrap())
            .unwrap();
        assert_eq!(
            a.tape.value(a.det_logits).data(),
            b.tape.value(b.det_logits).data()
        );
        assert_eq!(
            a.tape.value(a.seg_logits).data(),
            b.tape.value(b.seg_logits).data()
        );
    }

    #[test]
    fn zeroing_lidar_split_kills_lidar_branch_gradients() {
        let mut net = Network::build(&small_cfg()).unwrap();
        let idx = net.topo.layout.fusion_w_lid;
        let shape = net.store.param(idx).value.shape();
        net.store.param_mut(idx).value = Tensor::zeros(shape.0, shape.1);

        let x_lid = Tensor::new(1, 8, vec![0.5; 8]).unwrap();
        let x_img = Tensor::new(1, 4, vec![-0.5, 0.25, 1.0, 0.75]).unwrap();
        let pass = net.forward(&x_lid, &x_img).unwrap();
        let mut tape = pass.tape;
        let l = tape
            .compute_loss(
                LossKind::SoftmaxCe,
                pass.det_logits,
                LossTarget::Classes(vec![1]),
                &[1.0],
            )
            .unwrap();
        let gm = tape.backward(l).unwrap();
        assert_eq!(gm.region_norm(RegionTag::LidarBranch).unwrap(), 0.0);
        assert!(gm.region_norm(RegionTag::ImageBranch).unwrap() > 0.0);
    }

    #[test]
    fn seg_only_loss_leaves_det_head_untouched() {
        let net = Network::build(&small_cfg()).unwrap();
        let pass = net
            .forward(&Tensor::new(1, 8, vec![0.1; 8]).unwrap(), &Tensor::new(1, 4, vec![0.2; 4]).unwrap())
            .unwrap();
        let mut tape = pass.tape;
        let l = tape
            .compute_loss(
                LossKind::SigmoidBce,
                pass.seg_logits,
                LossTarget::Values(Tensor::new(1, 5, vec![1.0, 0.0, 1.0, 0.0, 1.0]).unwrap()),
                &[1.0],
            )
            .unwrap();
        let gm = tape.backward(l).unwrap();
        assert_eq!(gm.region_norm(RegionTag::HeadDet).unwrap(), 0.0);
        assert!(gm.region_norm(RegionTag::HeadSeg).unwrap() > 0.0);
    }

    #[test]
    fn shared_last_gradient_delegates_to_region() {
        let net = Network::build(&small_cfg()).unwrap();
        let pass = net
            .forward(&Tensor::new(2, 8, vec![0.4; 16]).unwrap(), &Tensor::new(2, 4, vec![0.1; 8]).unwrap())
            .unwrap();
        let mut tape = pass.tape;
        let l = tape
            .compute_loss(
                LossKind::SoftmaxCe,
                pass.det_logits,
                LossTarget::Classes(vec![0, 1]),
                &[1.0, 1.0],
            )
            .unwrap();
        let gm = tape.backward(l).unwrap();
        assert_eq!(
            net.shared_last_gradient(&gm).unwrap(),
            gm.region_gradient(RegionTag::SharedLast).unwrap()
        );

        let fully_masked = tape
            .compute_loss(
                LossKind::SoftmaxCe,
                pass.det_logits,
                LossTarget::Classes(vec![0, 1]),
                &[0.0, 0.0],
            )
            .unwrap();
        let gm0 = tape.backward(fully_masked).unwrap();
        assert!(net
            .shared_last_gradient(&gm0)
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::build(&small_cfg()).unwrap();
        let x_lid = Tensor::new(3, 8, (0..24).map(|v| (v as f64).sin()).collect()).unwrap();
        let x_img = Tensor::new(3, 4, (0..12).map(|v| (v as f64).cos()).collect()).unwrap();
        let a = net.forward(&x_lid, &x_img).unwrap();
        let b = net.forward(&x_lid, &x_img).unwrap();
        assert_eq!(
            a.tape.value(a.det_logits).data(),
            b.tape.value(b.det_logits).data()
        );
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let net = Network::build(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        net.save_checkpoint(&path).unwrap();
        let loaded = Network::load_checkpoint(&path).unwrap();
        for (a, b) in net.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.region, b.region);
            let ba: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb, "param {}", a.name);
        }
    }

    #[test]
    fn region_partition_covers_every_parameter() {
        let net = Network::build(&NetConfig::default()).unwrap();
        let mut counts = std::collections::HashMap::new();
        for p in net.store.iter() {
            *counts.entry(p.region).or_insert(0usize) += 1;
        }
        for tag in RegionTag::ALL {
            assert!(counts.contains_key(&tag), "missing region {tag}");
        }
        assert_eq!(counts[&RegionTag::SharedLast], 1);
        assert_eq!(counts[&RegionTag::FusionRest], 1);
    }
}
