//! Cascaded dual-U-Net: residual blocks, within-net skip connections,
//! between-net connections, per-decoder-level auxiliary heads, and the
//! two softmax branch heads, plus test-time fusion of the branch outputs
//! with the non-brain mask.
//!
//! Stage one separates whole tumor from background (2 classes); stage two
//! segments the substructures (4 classes). Stage two consumes stage one's
//! full-resolution feature map and concatenates each same-resolution
//! stage-one decoder feature into its encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LabelMap, Mask};
use crate::tensor::{Graph, ParamBinding, ParamSet, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CuNetConfig {
    /// Input modalities.
    pub in_channels: usize,
    /// Channel width at full resolution; doubles per level.
    pub base_channels: usize,
    /// Down-sampling steps per U-Net.
    pub depth: usize,
    /// Stage-one classes (tumor vs non-tumor).
    pub branch1_classes: usize,
    /// Stage-two classes (background + three substructures).
    pub branch2_classes: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for CuNetConfig {
    fn default() -> Self {
        CuNetConfig {
            in_channels: 4,
            base_channels: 16,
            depth: 4,
            branch1_classes: 2,
            branch2_classes: 4,
            seed: 0,
        }
    }
}

impl CuNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.in_channels < 1 || self.base_channels < 1 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.branch1_classes < 2 || self.branch2_classes < 2 {
            return Err(Error::Config("branch heads need at least 2 classes".into()));
        }
        Ok(())
    }

    /// One auxiliary head per decoder level per U-Net.
    pub fn aux_head_count(&self) -> usize {
        2 * self.depth
    }

    /// Spatial extents must be divisible by this.
    pub fn extent_divisor(&self) -> usize {
        1 << self.depth
    }
}

/// Branch and auxiliary probability maps, all at input resolution and
/// channel-normalized. `aux` holds the stage-one heads first (deepest
/// decoder level first), then the stage-two heads in the same order.
#[derive(Debug, Clone)]
pub struct CascadeOutputs {
    pub branch1: Tensor,
    pub branch2: Tensor,
    pub aux: Vec<Tensor>,
}

/// Graph handles of one forward pass, for loss assembly.
pub struct CascadeVars {
    pub branch1: Var,
    pub branch2: Var,
    /// Stage-one aux heads, deepest decoder level first.
    pub aux1: Vec<Var>,
    /// Stage-two aux heads, deepest decoder level first.
    pub aux2: Vec<Var>,
    /// Named activation checkpoints, in execution order.
    pub taps: Vec<(String, Var)>,
}

impl CascadeVars {
    /// All auxiliary heads in the canonical order (stage one, then two).
    pub fn aux_all(&self) -> Vec<Var> {
        self.aux1.iter().chain(&self.aux2).copied().collect()
    }
}

pub struct CuNet {
    config: CuNetConfig,
    params: ParamSet,
}

fn ch(base: usize, level: usize) -> usize {
    base << level
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv(&mut self, params: &mut ParamSet, name: &str, co: usize, ci: usize, k: usize, bias: bool) {
        let fan_in = (ci * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid init sigma");
        let n = co * ci * k * k;
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        params.insert(format!("{name}.w"), Tensor::new([co, ci, k, k], data));
        if bias {
            params.insert(format!("{name}.b"), Tensor::zeros([1, co, 1, 1]));
        }
    }

    /// Transposed-conv kernel in conv layout [c_in, c_out, k, k]: the
    /// layer maps c_in channels to c_out at twice the resolution.
    fn deconv(&mut self, params: &mut ParamSet, name: &str, c_in: usize, c_out: usize, k: usize) {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid init sigma");
        let n = c_in * c_out * k * k;
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        params.insert(format!("{name}.w"), Tensor::new([c_in, c_out, k, k], data));
    }

    fn residual_block(&mut self, params: &mut ParamSet, prefix: &str, in_c: usize, out_c: usize) {
        self.conv(params, &format!("{prefix}.c1"), out_c, in_c, 3, true);
        self.conv(params, &format!("{prefix}.c2"), out_c, out_c, 3, true);
        if in_c != out_c {
            self.conv(params, &format!("{prefix}.proj"), out_c, in_c, 1, false);
        }
    }
}

impl CuNet {
    /// Register every parameter with seeded He-style initialization.
    pub fn new(config: CuNetConfig) -> Result<CuNet> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let b = config.base_channels;
        let d = config.depth;
        for (net, net_in, classes) in [
            ("u1", config.in_channels, config.branch1_classes),
            ("u2", b, config.branch2_classes),
        ] {
            let between = net == "u2";
            for k in 0..d {
                let mut in_c = if k == 0 { net_in } else { ch(b, k - 1) };
                if between {
                    in_c += ch(b, k);
                }
                init.residual_block(&mut params, &format!("{net}.enc{k}"), in_c, ch(b, k));
            }
            init.residual_block(&mut params, &format!("{net}.bot"), ch(b, d - 1), ch(b, d));
            for k in (0..d).rev() {
                init.deconv(&mut params, &format!("{net}.dec{k}.up"), ch(b, k + 1), ch(b, k), 4);
                init.residual_block(&mut params, &format!("{net}.dec{k}"), 2 * ch(b, k), ch(b, k));
            }
            for k in (0..d).rev() {
                for j in 0..k {
                    init.deconv(
                        &mut params,
                        &format!("{net}.aux{k}.up{j}"),
                        ch(b, k - j),
                        ch(b, k - j - 1),
                        4,
                    );
                }
                init.conv(&mut params, &format!("{net}.aux{k}.out"), classes, b, 1, true);
            }
            init.conv(&mut params, &format!("{net}.branch"), classes, b, 1, true);
        }
        Ok(CuNet { config, params })
    }

    pub fn config(&self) -> &CuNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        let expect: Vec<&str> = self.params.names().collect();
        let got: Vec<&str> = params.names().collect();
        if expect != got {
            return Err(Error::Config("checkpoint parameters do not match this architecture".into()));
        }
        for name in expect {
            if params.get(name).shape() != self.params.get(name).shape() {
                return Err(Error::Config(format!("checkpoint shape mismatch for {name}")));
            }
        }
        self.params = params;
        Ok(())
    }

    fn conv_layer(&self, g: &mut Graph, bind: &ParamBinding, name: &str, x: Var, padding: usize) -> Var {
        let w = bind.var(&format!("{name}.w"));
        let bias = if self.params.contains(&format!("{name}.b")) {
            bind.var(&format!("{name}.b"))
        } else {
            let co = self.params.get(&format!("{name}.w")).shape()[0];
            g.constant(Tensor::zeros([1, co, 1, 1]))
        };
        g.conv2d(x, w, bias, 1, padding)
    }

    /// y = relu(conv3x3(relu(conv3x3(x))) + project(x)).
    fn residual_block(&self, g: &mut Graph, bind: &ParamBinding, prefix: &str, x: Var) -> Var {
        let h = self.conv_layer(g, bind, &format!("{prefix}.c1"), x, 1);
        let h = g.relu(h);
        let h = self.conv_layer(g, bind, &format!("{prefix}.c2"), h, 1);
        let shortcut = if self.params.contains(&format!("{prefix}.proj.w")) {
            self.conv_layer(g, bind, &format!("{prefix}.proj"), x, 0)
        } else {
            x
        };
        let sum = g.elementwise_add(h, shortcut);
        g.relu(sum)
    }

    fn aux_head(&self, g: &mut Graph, bind: &ParamBinding, net: &str, k: usize, x: Var) -> Var {
        let mut h = x;
        for j in 0..k {
            let w = bind.var(&format!("{net}.aux{k}.up{j}.w"));
            h = g.transposed_conv2d(h, w, 2);
        }
        let logits = self.conv_layer(g, bind, &format!("{net}.aux{k}.out"), h, 0);
        g.softmax_channels(logits)
    }

    fn unet(
        &self,
        g: &mut Graph,
        bind: &ParamBinding,
        net: &str,
        input: Var,
        between: Option<&[Var]>,
        taps: &mut Vec<(String, Var)>,
    ) -> (Var, Vec<Var>, Vec<Var>) {
        let d = self.config.depth;
        let mut skips = Vec::with_capacity(d);
        let mut x = input;
        for k in 0..d {
            if let Some(decoder_feats) = between {
                x = g.channel_concat(x, decoder_feats[k]);
            }
            x = self.residual_block(g, bind, &format!("{net}.enc{k}"), x);
            taps.push((format!("{net}.enc{k}"), x));
            skips.push(x);
            x = g.max_pool2(x);
        }
        x = self.residual_block(g, bind, &format!("{net}.bot"), x);
        taps.push((format!("{net}.bot"), x));
        let mut decoder = vec![x; d];
        for k in (0..d).rev() {
            let w = bind.var(&format!("{net}.dec{k}.up.w"));
            let up = g.transposed_conv2d(x, w, 2);
            let cat = g.channel_concat(up, skips[k]);
            x = self.residual_block(g, bind, &format!("{net}.dec{k}"), cat);
            taps.push((format!("{net}.dec{k}"), x));
            decoder[k] = x;
        }
        let mut aux = Vec::with_capacity(d);
        for k in (0..d).rev() {
            let head = self.aux_head(g, bind, net, k, decoder[k]);
            taps.push((format!("{net}.aux{k}"), head));
            aux.push(head);
        }
        let logits = self.conv_layer(g, bind, &format!("{net}.branch"), x, 0);
        let branch = g.softmax_channels(logits);
        taps.push((format!("{net}.branch"), branch));
        (branch, aux, decoder)
    }

    /// Build the full cascade on an existing graph. The input must already
    /// be a node of `g` with extents divisible by 2^depth.
    pub fn forward_graph(&self, g: &mut Graph, bind: &ParamBinding, input: Var) -> CascadeVars {
        let [_, c, h, w] = g.value(input).shape();
        let div = self.config.extent_divisor();
        assert_eq!(c, self.config.in_channels, "input has {c} channels, model expects {}", self.config.in_channels);
        assert!(
            h % div == 0 && w % div == 0,
            "input extents {h}x{w} not divisible by 2^depth = {div}"
        );
        let mut taps = Vec::new();
        let (branch1, aux1, decoder1) = self.unet(g, bind, "u1", input, None, &mut taps);
        let hand_off = decoder1[0];
        let (branch2, aux2, _) = self.unet(g, bind, "u2", hand_off, Some(&decoder1), &mut taps);
        CascadeVars { branch1, branch2, aux1, aux2, taps }
    }

    /// Run inference and extract the probability maps, verifying that
    /// every recorded activation stayed finite.
    pub fn forward_cascade(&self, input: &Tensor) -> Result<CascadeOutputs> {
        let [_, c, h, w] = input.shape();
        let div = self.config.extent_divisor();
        if c != self.config.in_channels {
            return Err(Error::Input(format!(
                "input has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        if !(h.is_multiple_of(div) && w.is_multiple_of(div)) {
            return Err(Error::Input(format!("input extents {h}x{w} not divisible by 2^depth = {div}")));
        }
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g);
        let input_var = g.constant(input.clone());
        let vars = self.forward_graph(&mut g, &bind, input_var);
        for (name, v) in &vars.taps {
            if !g.value(*v).all_finite() {
                return Err(Error::Numeric(format!("non-finite activation in layer {name}")));
            }
        }
        Ok(CascadeOutputs {
            branch1: g.value(vars.branch1).clone(),
            branch2: g.value(vars.branch2).clone(),
            aux: vars.aux_all().iter().map(|v| g.value(*v).clone()).collect(),
        })
    }
}

/// Fuse the two branch outputs with the non-brain mask into a label map.
///
/// A pixel is background when it is outside the brain or stage one votes
/// non-tumor; otherwise the winning substructure channel of stage two
/// (background channel excluded) maps to {1, 2, 4}, ties toward the
/// lower label.
pub fn fuse_predictions(branch1: &Tensor, branch2: &Tensor, nonbrain: &Mask) -> Result<LabelMap> {
    let [b, c1, h, w] = branch1.shape();
    let [b2, c2, h2, w2] = branch2.shape();
    if c1 != 2 || c2 != 4 {
        return Err(Error::Contract(format!(
            "fuse_predictions expects 2- and 4-channel maps, got {c1} and {c2}"
        )));
    }
    if (b, h, w) != (b2, h2, w2) || nonbrain.shape() != (b, h, w) {
        return Err(Error::Contract(format!(
            "fuse_predictions extents differ: branch1 {:?}, branch2 {:?}, mask {:?}",
            branch1.shape(),
            branch2.shape(),
            nonbrain.shape()
        )));
    }
    const SUBSTRUCTURE_LABELS: [u8; 3] = [1, 2, 4];
    let mut out = LabelMap::zeros(b, h, w);
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                if nonbrain.get(n, y, x) {
                    continue;
                }
                // Stage one: channel 1 must strictly beat non-tumor.
                if branch1.at(n, 1, y, x) <= branch1.at(n, 0, y, x) {
                    continue;
                }
                let mut best = 0usize;
                let mut best_v = branch2.at(n, 1, y, x);
                for (i, ch) in (2..4).enumerate() {
                    let v = branch2.at(n, ch, y, x);
                    if v > best_v {
                        best_v = v;
                        best = i + 1;
                    }
                }
                out.set(n, y, x, SUBSTRUCTURE_LABELS[best]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_config(depth: usize, base: usize) -> CuNetConfig {
        CuNetConfig { in_channels: 4, base_channels: base, depth, seed: 9, ..Default::default() }
    }

    fn random_input(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn aux_head_count_is_twice_depth() {
        for depth in 1..=4 {
            let cfg = small_config(depth, 2);
            assert_eq!(cfg.aux_head_count(), 2 * depth);
            let model = CuNet::new(cfg).unwrap();
            let size = model.config().extent_divisor().max(8);
            let input = random_input([1, 4, size, size], 1);
            let out = model.forward_cascade(&input).unwrap();
            assert_eq!(out.aux.len(), 2 * depth);
        }
    }

    #[test]
    fn outputs_at_input_resolution_and_normalized() {
        let model = CuNet::new(small_config(2, 4)).unwrap();
        let input = random_input([2, 4, 16, 16], 2);
        let out = model.forward_cascade(&input).unwrap();
        assert_eq!(out.branch1.shape(), [2, 2, 16, 16]);
        assert_eq!(out.branch2.shape(), [2, 4, 16, 16]);
        for (i, t) in out.aux.iter().enumerate() {
            let expect_c = if i < 2 { 2 } else { 4 };
            assert_eq!(t.shape(), [2, expect_c, 16, 16], "aux {i}");
        }
        for t in std::iter::once(&out.branch1).chain(std::iter::once(&out.branch2)).chain(&out.aux) {
            let [b, c, h, w] = t.shape();
            for n in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let s: f64 = (0..c).map(|ch| t.at(n, ch, y, x)).sum();
                        assert!((s - 1.0).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zeroed_heads_give_uniform_outputs() {
        let mut model = CuNet::new(small_config(2, 4)).unwrap();
        for net in ["u1", "u2"] {
            for name in [format!("{net}.branch.w"), format!("{net}.branch.b")] {
                let t = model.params_mut().get_mut(&name);
                t.data_mut().fill(0.0);
            }
        }
        let input = Tensor::zeros([1, 4, 16, 16]);
        let out = model.forward_cascade(&input).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert!((out.branch1.at(0, 0, y, x) - 0.5).abs() <= 1e-12);
                assert!((out.branch1.at(0, 1, y, x) - 0.5).abs() <= 1e-12);
                for c in 0..4 {
                    assert!((out.branch2.at(0, c, y, x) - 0.25).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn residual_block_with_zero_convs_passes_relu_of_input() {
        let mut model = CuNet::new(small_config(1, 4)).unwrap();
        // Zero the first stage-one encoder block; its input channels equal
        // its output channels only through the projection, so use a block
        // where in == out: u1.dec0 has 8 -> 4 with proj, u1.enc0 is 4 -> 4
        // for base 4 and 4 input channels (identity shortcut).
        assert!(
            !model.params().contains("u1.enc0.proj.w"),
            "enc0 with in == out must use the identity shortcut"
        );
        for name in ["u1.enc0.c1.w", "u1.enc0.c1.b", "u1.enc0.c2.w", "u1.enc0.c2.b"] {
            model.params_mut().get_mut(name).data_mut().fill(0.0);
        }
        let input = random_input([1, 4, 8, 8], 3);
        let mut g = Graph::new();
        let bind = model.params().bind(&mut g);
        let x = g.constant(input.clone());
        let y = model.residual_block(&mut g, &bind, "u1.enc0", x);
        let got = g.value(y);
        for (o, i) in got.data().iter().zip(input.data()) {
            assert_eq!(*o, i.max(0.0));
        }
    }

    #[test]
    fn residual_block_gradient_flows_through_both_paths() {
        let model = CuNet::new(small_config(1, 4)).unwrap();
        let input = random_input([1, 4, 8, 8], 4);
        let err = crate::tensor::finite_difference_check(
            |g, v| {
                let bind = model.params().bind(g);
                let y = model.residual_block(g, &bind, "u1.enc0", v);
                g.sum_all(y)
            },
            &input,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "residual block fd error {err}");
    }

    #[test]
    fn cascade_has_more_parameters_than_single_unet() {
        let model = CuNet::new(small_config(3, 4)).unwrap();
        let total: usize = model.params().value_count();
        let u1_only: usize = model
            .params()
            .names()
            .filter(|n| n.starts_with("u1."))
            .map(|n| model.params().get(n).numel())
            .sum();
        assert!(u1_only > 0);
        assert!(total > u1_only);
    }

    #[test]
    fn between_net_connections_widen_stage_two_encoders() {
        let cfg = small_config(3, 4);
        let model = CuNet::new(cfg.clone()).unwrap();
        let b = cfg.base_channels;
        for k in 0..cfg.depth {
            let baseline = if k == 0 { b } else { b << (k - 1) };
            let dec_channels = b << k;
            let got = model.params().get(&format!("u2.enc{k}.c1.w")).shape()[1];
            assert_eq!(
                got,
                baseline + dec_channels,
                "stage-two encoder {k} input channels must grow by stage-one decoder width"
            );
            // Stage one has no such widening.
            let u1_in = model.params().get(&format!("u1.enc{k}.c1.w")).shape()[1];
            let u1_baseline = if k == 0 { cfg.in_channels } else { b << (k - 1) };
            assert_eq!(u1_in, u1_baseline);
        }
    }

    #[test]
    fn forward_is_batch_decomposable() {
        let model = CuNet::new(small_config(2, 4)).unwrap();
        let input = random_input([2, 4, 16, 16], 5);
        let joint = model.forward_cascade(&input).unwrap();
        for n in 0..2 {
            let mut single = Tensor::zeros([1, 4, 16, 16]);
            for c in 0..4 {
                for y in 0..16 {
                    for x in 0..16 {
                        single.set(0, c, y, x, input.at(n, c, y, x));
                    }
                }
            }
            let solo = model.forward_cascade(&single).unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    for c in 0..2 {
                        assert!((joint.branch1.at(n, c, y, x) - solo.branch1.at(0, c, y, x)).abs() <= 1e-12);
                    }
                    for c in 0..4 {
                        assert!((joint.branch2.at(n, c, y, x) - solo.branch2.at(0, c, y, x)).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_rejects_indivisible_extents() {
        let model = CuNet::new(small_config(3, 2)).unwrap();
        let input = Tensor::zeros([1, 4, 20, 20]);
        assert!(matches!(model.forward_cascade(&input), Err(Error::Input(_))));
    }

    #[test]
    fn non_finite_activation_names_the_layer() {
        let mut model = CuNet::new(small_config(2, 4)).unwrap();
        model.params_mut().get_mut("u1.bot.c1.w").data_mut()[0] = f64::NAN;
        let input = random_input([1, 4, 16, 16], 7);
        match model.forward_cascade(&input) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("u1.bot"), "unexpected layer in {msg:?}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn fixed_seed_rebuild_is_identical() {
        let a = CuNet::new(small_config(2, 4)).unwrap();
        let b = CuNet::new(small_config(2, 4)).unwrap();
        assert!(a.params().bit_eq(b.params()));
        let c = CuNet::new(CuNetConfig { seed: 10, ..small_config(2, 4) }).unwrap();
        assert!(!a.params().bit_eq(c.params()));
    }

    #[test]
    fn fuse_trivial_cases() {
        let all_masked = Mask::filled(1, 2, 2, true);
        let b1 = Tensor::filled([1, 2, 2, 2], 0.5);
        let b2 = Tensor::filled([1, 4, 2, 2], 0.25);
        let out = fuse_predictions(&b1, &b2, &all_masked).unwrap();
        assert!(out.data().iter().all(|&v| v == 0));

        // Confident tumor everywhere, edema channel maximal: label 2 inside brain.
        let mut b1 = Tensor::zeros([1, 2, 2, 2]);
        let mut b2 = Tensor::zeros([1, 4, 2, 2]);
        for y in 0..2 {
            for x in 0..2 {
                b1.set(0, 1, y, x, 0.9);
                b1.set(0, 0, y, x, 0.1);
                b2.set(0, 2, y, x, 0.7);
                b2.set(0, 0, y, x, 0.3);
            }
        }
        let none_masked = Mask::filled(1, 2, 2, false);
        let out = fuse_predictions(&b1, &b2, &none_masked).unwrap();
        assert!(out.data().iter().all(|&v| v == 2));
    }

    #[test]
    fn fuse_matches_per_pixel_rule_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (h, w) = (6, 7);
            let mut b1 = Tensor::zeros([1, 2, h, w]);
            let mut b2 = Tensor::zeros([1, 4, h, w]);
            let mut nb = Mask::filled(1, h, w, false);
            for y in 0..h {
                for x in 0..w {
                    let p: f64 = rng.random();
                    b1.set(0, 1, y, x, p);
                    b1.set(0, 0, y, x, 1.0 - p);
                    let mut rest = 1.0;
                    for c in 0..3 {
                        let v = rng.random_range(0.0..rest);
                        b2.set(0, c, y, x, v);
                        rest -= v;
                    }
                    b2.set(0, 3, y, x, rest);
                    nb.set(0, y, x, rng.random_bool(0.3));
                }
            }
            let got = fuse_predictions(&b1, &b2, &nb).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let want = if nb.get(0, y, x) || b1.at(0, 1, y, x) <= b1.at(0, 0, y, x) {
                        0u8
                    } else {
                        let candidates = [(b2.at(0, 1, y, x), 1u8), (b2.at(0, 2, y, x), 2), (b2.at(0, 3, y, x), 4)];
                        let mut best = candidates[0];
                        for c in &candidates[1..] {
                            if c.0 > best.0 {
                                best = *c;
                            }
                        }
                        best.1
                    };
                    assert_eq!(got.get(0, y, x), want, "pixel ({y},{x})");
                }
            }
            // Nothing outside the brain mask.
            for y in 0..h {
                for x in 0..w {
                    if nb.get(0, y, x) {
                        assert_eq!(got.get(0, y, x), 0);
                    }
                }
            }
        }
    }

    #[test]
    fn fuse_tie_breaks_toward_lower_label() {
        let mut b1 = Tensor::zeros([1, 2, 1, 1]);
        b1.set(0, 1, 0, 0, 1.0);
        let b2 = Tensor::filled([1, 4, 1, 1], 0.25);
        let nb = Mask::filled(1, 1, 1, false);
        let out = fuse_predictions(&b1, &b2, &nb).unwrap();
        assert_eq!(out.get(0, 0, 0), 1);
    }

    #[test]
    fn fuse_rejects_mismatched_shapes() {
        let b1 = Tensor::zeros([1, 2, 4, 4]);
        let b2 = Tensor::zeros([1, 4, 2, 2]);
        let nb = Mask::filled(1, 4, 4, false);
        assert!(matches!(fuse_predictions(&b1, &b2, &nb), Err(Error::Contract(_))));
    }
}
