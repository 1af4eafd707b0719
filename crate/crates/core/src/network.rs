//! Three-stream glass detection network.
//!
//! A five-stage encoder feeds three decoders:
//!
//! * the **interior** stream fuses levels 4 and 5 to locate glass coarsely,
//! * the **boundary** stream runs over all five levels with short
//!   connections and one side output per level,
//! * the **glass** stream runs over levels 1, 2 and 5.
//!
//! Every decoder level goes through a multi-scale interactive dilation
//! module ([`Mid`]). The boundary-aware feature mosaic ([`Bfm`]) injects the
//! predicted boundary and interior maps into the finest glass feature before
//! the final predict block.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::neural::checkpoint::Checkpoint;
use crate::neural::{
    add, batch_norm, concat_channels, conv2d, global_avg_pool, linear, mul, relu, reshape,
    resize_bilinear, sigmoid, Conv2dSpec, Init, NormMode, ParamStore, Real, SharedStats, Tensor,
};

pub const LEVELS: usize = 5;
/// Input extents must be a multiple of this.
pub const INPUT_MULTIPLE: usize = 16;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub encoder_channels: [usize; LEVELS],
    pub decoder_width: usize,
    pub dilation_rates: Vec<usize>,
    pub se_reduction: usize,
    pub enable_boundary_stream: bool,
    pub enable_interior_stream: bool,
    pub enable_bfm: bool,
    pub enable_mid: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            encoder_channels: Self::widths(0.5),
            decoder_width: 8,
            dilation_rates: vec![2, 4, 8, 16],
            se_reduction: 4,
            enable_boundary_stream: true,
            enable_interior_stream: true,
            enable_bfm: true,
            enable_mid: true,
        }
    }
}

impl NetworkConfig {
    /// Encoder widths `[16, 32, 64, 128, 256] · factor`, at least 1 each.
    pub fn widths(factor: f64) -> [usize; LEVELS] {
        [16, 32, 64, 128, 256].map(|w| ((w as f64 * factor).round() as usize).max(1))
    }

    /// Full-resolution setting (512×512 input).
    pub fn full_scale() -> Self {
        Self {
            input_size: 512,
            encoder_channels: Self::widths(1.0),
            decoder_width: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.input_size % INPUT_MULTIPLE != 0 {
            return bad(format!(
                "net.input_size {} must be a positive multiple of {INPUT_MULTIPLE}",
                self.input_size
            ));
        }
        if self.encoder_channels.contains(&0) || self.decoder_width == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.dilation_rates.is_empty()
            || self.dilation_rates[0] == 0
            || self.dilation_rates.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "net.dilation_rates {:?} must be positive and strictly increasing",
                self.dilation_rates
            ));
        }
        if self.se_reduction == 0 || self.decoder_width < self.se_reduction {
            return bad(format!(
                "net.decoder_width {} must be at least net.se_reduction {}",
                self.decoder_width, self.se_reduction
            ));
        }
        Ok(())
    }

    pub fn glass_branches(&self) -> usize {
        GLASS_LEVELS.len()
    }

    pub fn boundary_branches(&self) -> usize {
        if self.enable_boundary_stream {
            LEVELS
        } else {
            0
        }
    }
}

impl NetworkConfig {
    /// Appends the configuration as `meta.*` entries.
    pub fn write_meta(&self, ck: &mut Checkpoint) {
        let one = |v: usize| vec![v as f32];
        ck.push("meta.input_size", &[1], one(self.input_size));
        ck.push(
            "meta.encoder_channels",
            &[LEVELS],
            self.encoder_channels.iter().map(|&c| c as f32).collect(),
        );
        ck.push("meta.decoder_width", &[1], one(self.decoder_width));
        ck.push(
            "meta.dilation_rates",
            &[self.dilation_rates.len()],
            self.dilation_rates.iter().map(|&r| r as f32).collect(),
        );
        ck.push("meta.se_reduction", &[1], one(self.se_reduction));
        ck.push(
            "meta.flags",
            &[4],
            [
                self.enable_boundary_stream,
                self.enable_interior_stream,
                self.enable_bfm,
                self.enable_mid,
            ]
            .map(|f| f as u8 as f32)
            .to_vec(),
        );
    }

    pub fn read_meta(ck: &Checkpoint) -> Result<Self> {
        let get = |name: &str| -> Result<Vec<usize>> {
            let e = ck
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
            e.values
                .iter()
                .map(|&v| {
                    (v >= 0.0 && v.fract() == 0.0)
                        .then_some(v as usize)
                        .ok_or_else(|| Error::Checkpoint(format!("entry {name} holds non-integer {v}")))
                })
                .collect()
        };
        let scalar = |name: &str| -> Result<usize> {
            match get(name)?[..] {
                [v] => Ok(v),
                _ => Err(Error::Checkpoint(format!("entry {name} must hold one value"))),
            }
        };
        let channels = get("meta.encoder_channels")?;
        let flags = get("meta.flags")?;
        let (Ok(encoder_channels), &[b, i, f, m]) = (<[usize; LEVELS]>::try_from(channels), &flags[..]) else {
            return Err(Error::Checkpoint("malformed network metadata".into()));
        };
        let cfg = Self {
            input_size: scalar("meta.input_size")?,
            encoder_channels,
            decoder_width: scalar("meta.decoder_width")?,
            dilation_rates: get("meta.dilation_rates")?,
            se_reduction: scalar("meta.se_reduction")?,
            enable_boundary_stream: b != 0,
            enable_interior_stream: i != 0,
            enable_bfm: f != 0,
            enable_mid: m != 0,
        };
        cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(cfg)
    }
}

/// Levels (1-based) feeding the glass stream.
pub const GLASS_LEVELS: [usize; 3] = [1, 2, 5];

/// Conv (no bias) → batch norm → ReLU.
pub struct ConvBnRelu<T: Real> {
    weight: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    stats: SharedStats<T>,
    spec: Conv2dSpec,
}

impl<T: Real> ConvBnRelu<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{name}.w"),
                &[cout, cin, kernel, kernel],
                Init::FanIn(cin * kernel * kernel),
            )?,
            gamma: store.add(format!("{name}.bn.gamma"), &[cout], Init::Ones)?,
            beta: store.add(format!("{name}.bn.beta"), &[cout], Init::Zeros)?,
            stats: store.add_bn_stats(format!("{name}.bn"), cout)?,
            spec,
        })
    }

    pub fn same(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        Self::new(store, name, cin, cout, kernel, Conv2dSpec::same(kernel, 1))
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.weight, None, self.spec)?;
        let y = batch_norm(&y, &self.gamma, &self.beta, &mut self.stats.borrow_mut(), mode, BN_EPS)?;
        Ok(relu(&y))
    }

    /// Convolution only, skipping normalization and activation.
    pub fn forward_linear(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, None, self.spec)
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }
}

/// Plain convolution with bias.
pub struct Conv<T: Real> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    spec: Conv2dSpec,
}

impl<T: Real> Conv<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{name}.w"),
                &[cout, cin, kernel, kernel],
                Init::FanIn(cin * kernel * kernel),
            )?,
            bias: store.add(format!("{name}.b"), &[cout], Init::Zeros)?,
            spec: Conv2dSpec::same(kernel, 1),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, Some(&self.bias), self.spec)
    }
}

/// Squeeze-and-excitation channel gate.
pub struct SeBlock<T: Real> {
    w1: Tensor<T>,
    b1: Tensor<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
}

impl<T: Real> SeBlock<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(Error::invalid(format!(
                "SE block needs channels ({channels}) >= reduction ({reduction})"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            w1: store.add(format!("{name}.fc1.w"), &[channels, hidden], Init::FanIn(channels))?,
            b1: store.add(format!("{name}.fc1.b"), &[hidden], Init::Zeros)?,
            w2: store.add(format!("{name}.fc2.w"), &[hidden, channels], Init::FanIn(hidden))?,
            b2: store.add(format!("{name}.fc2.b"), &[channels], Init::Zeros)?,
        })
    }

    /// Per-channel gate in `(0, 1)`, shaped `[B, C, 1, 1]`.
    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let &[b, c, _, _] = x.shape() else {
            return Err(Error::ShapeMismatch {
                op: "se_block",
                expected: vec![0, 0, 0, 0],
                actual: x.shape().to_vec(),
            });
        };
        let squeezed = reshape(&global_avg_pool(x)?, &[b, c])?;
        let hidden = relu(&linear(&squeezed, &self.w1, &self.b1)?);
        let excited = sigmoid(&linear(&hidden, &self.w2, &self.b2)?);
        reshape(&excited, &[b, c, 1, 1])
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        mul(x, &self.gate(x)?)
    }

    pub fn excitation_bias(&self) -> &Tensor<T> {
        &self.b2
    }
}

/// Multi-scale interactive dilation module.
///
/// Branch 0 is a local 3×3 conv. Branch `k` adds the output of branch
/// `k − 1` to its own 3×3 conv of the input, then applies a 3×3 conv with
/// dilation `rates[k − 1]`. The branches are concatenated, fused by a 1×1
/// conv and added back to the input. When disabled the module is a single
/// 3×3 conv.
pub struct Mid<T: Real> {
    local: ConvBnRelu<T>,
    pre: Vec<ConvBnRelu<T>>,
    dilated: Vec<ConvBnRelu<T>>,
    fuse: Option<ConvBnRelu<T>>,
}

impl<T: Real> Mid<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, width: usize, rates: &[usize], enabled: bool) -> Result<Self> {
        let local = ConvBnRelu::same(store, &format!("{name}.local"), width, width, 3)?;
        if !enabled {
            return Ok(Self {
                local,
                pre: Vec::new(),
                dilated: Vec::new(),
                fuse: None,
            });
        }
        let mut pre = Vec::with_capacity(rates.len());
        let mut dilated = Vec::with_capacity(rates.len());
        for (k, &r) in rates.iter().enumerate() {
            pre.push(ConvBnRelu::same(store, &format!("{name}.b{}.pre", k + 1), width, width, 3)?);
            dilated.push(ConvBnRelu::new(
                store,
                &format!("{name}.b{}.dil", k + 1),
                width,
                width,
                3,
                Conv2dSpec::same(3, r),
            )?);
        }
        let fuse = ConvBnRelu::same(store, &format!("{name}.fuse"), width * (rates.len() + 1), width, 1)?;
        Ok(Self {
            local,
            pre,
            dilated,
            fuse: Some(fuse),
        })
    }

    fn run(
        &self,
        x: &Tensor<T>,
        layer: &dyn Fn(&ConvBnRelu<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let Some(fuse) = &self.fuse else {
            return layer(&self.local, x);
        };
        let mut branches = vec![layer(&self.local, x)?];
        for (pre, dil) in self.pre.iter().zip(&self.dilated) {
            let prev = branches.last().expect("branch 0 exists");
            let inp = add(&layer(pre, x)?, prev)?;
            branches.push(layer(dil, &inp)?);
        }
        let refs: Vec<&Tensor<T>> = branches.iter().collect();
        add(&layer(fuse, &concat_channels(&refs)?)?, x)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        self.run(x, &|l, t| l.forward(t, mode))
    }

    /// Same wiring with every conv applied without normalization or ReLU.
    pub fn forward_linear(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, &|l, t| l.forward_linear(t))
    }
}

/// 3×3 conv block then a 1×1 conv to one logit channel, upsampled to the
/// requested size.
pub struct PredictBlock<T: Real> {
    hidden: ConvBnRelu<T>,
    out: Conv<T>,
}

impl<T: Real> PredictBlock<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            hidden: ConvBnRelu::same(store, &format!("{name}.hidden"), width, width, 3)?,
            out: Conv::new(store, &format!("{name}.out"), width, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode, size: (usize, usize)) -> Result<Tensor<T>> {
        let logits = self.out.forward(&self.hidden.forward(x, mode)?)?;
        resize_bilinear(&logits, size.0, size.1)
    }
}

/// Boundary-aware feature mosaic: product attention with the boundary and
/// interior maps, each refined by conv + SE, added back to the glass
/// feature.
pub struct Bfm<T: Real> {
    conv_boundary: ConvBnRelu<T>,
    se_boundary: SeBlock<T>,
    conv_interior: ConvBnRelu<T>,
    se_interior: SeBlock<T>,
}

impl<T: Real> Bfm<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, width: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            conv_boundary: ConvBnRelu::same(store, &format!("{name}.boundary.conv"), width + 1, width, 3)?,
            se_boundary: SeBlock::new(store, &format!("{name}.boundary.se"), width, reduction)?,
            conv_interior: ConvBnRelu::same(store, &format!("{name}.interior.conv"), width + 1, width, 3)?,
            se_interior: SeBlock::new(store, &format!("{name}.interior.se"), width, reduction)?,
        })
    }

    fn enhance(
        conv: &ConvBnRelu<T>,
        se: &SeBlock<T>,
        feat: &Tensor<T>,
        attention: &Tensor<T>,
        mode: NormMode,
    ) -> Result<Tensor<T>> {
        let attended = mul(feat, attention)?;
        se.forward(&conv.forward(&concat_channels(&[&attended, attention])?, mode)?)
    }

    /// Attention maps are `[B,1,h,w]` probabilities at the feature
    /// resolution.
    pub fn forward(
        &self,
        boundary: &Tensor<T>,
        interior: &Tensor<T>,
        glass_feat: &Tensor<T>,
        mode: NormMode,
    ) -> Result<Tensor<T>> {
        let fb = Self::enhance(&self.conv_boundary, &self.se_boundary, glass_feat, boundary, mode)?;
        let fi = Self::enhance(&self.conv_interior, &self.se_interior, glass_feat, interior, mode)?;
        add(&add(glass_feat, &fb)?, &fi)
    }
}

/// Encoder feature maps `EF_1..EF_5` (strides 2 through 32).
#[derive(Debug, Clone)]
pub struct EncoderFeatures<T: Real> {
    pub ef: Vec<Tensor<T>>,
}

impl<T: Real> EncoderFeatures<T> {
    /// 1-based level accessor.
    pub fn level(&self, i: usize) -> &Tensor<T> {
        &self.ef[i - 1]
    }
}

struct Stage<T: Real> {
    down: ConvBnRelu<T>,
    conv: ConvBnRelu<T>,
}

pub struct Encoder<T: Real> {
    stages: Vec<Stage<T>>,
}

impl<T: Real> Encoder<T> {
    fn new(store: &mut ParamStore<T>, widths: &[usize; LEVELS]) -> Result<Self> {
        let mut cin = 3;
        let mut stages = Vec::with_capacity(LEVELS);
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("encoder.s{}", i + 1);
            let down = Conv2dSpec {
                stride: 2,
                padding: 1,
                dilation: 1,
            };
            stages.push(Stage {
                down: ConvBnRelu::new(store, &format!("{name}.down"), cin, w, 3, down)?,
                conv: ConvBnRelu::same(store, &format!("{name}.conv"), w, w, 3)?,
            });
            cin = w;
        }
        Ok(Self { stages })
    }

    fn forward(&self, image: &Tensor<T>, mode: NormMode) -> Result<EncoderFeatures<T>> {
        let mut x = image.clone();
        let mut ef = Vec::with_capacity(LEVELS);
        for s in &self.stages {
            x = s.conv.forward(&s.down.forward(&x, mode)?, mode)?;
            ef.push(x.clone());
        }
        Ok(EncoderFeatures { ef })
    }
}

/// One decoder level: short-connection merge, MID, side prediction.
struct SideLevel<T: Real> {
    level: usize,
    lateral: Option<ConvBnRelu<T>>,
    merge: ConvBnRelu<T>,
    mid: Mid<T>,
    predict: PredictBlock<T>,
}

/// Decoder over a set of levels, processed coarse to fine.
struct Stream<T: Real> {
    sides: Vec<SideLevel<T>>,
}

struct StreamOutput<T: Real> {
    /// Side logits at input resolution, finest level first.
    logits: Vec<Tensor<T>>,
    /// MID output of the finest level.
    finest: Tensor<T>,
}

impl<T: Real> Stream<T> {
    fn new(store: &mut ParamStore<T>, name: &str, levels: &[usize], cfg: &NetworkConfig) -> Result<Self> {
        let d = cfg.decoder_width;
        let mut order = levels.to_vec();
        order.sort_unstable_by(|a, b| b.cmp(a));
        let mut sides = Vec::with_capacity(order.len());
        for (rank, &level) in order.iter().enumerate() {
            let prefix = format!("{name}.l{level}");
            let ef_ch = cfg.encoder_channels[level - 1];
            let (lateral, merge) = if rank == 0 {
                (None, ConvBnRelu::same(store, &format!("{prefix}.merge"), ef_ch, d, 3)?)
            } else {
                (
                    Some(ConvBnRelu::same(store, &format!("{prefix}.lateral"), ef_ch, d, 1)?),
                    ConvBnRelu::same(store, &format!("{prefix}.merge"), d * (rank + 1), d, 3)?,
                )
            };
            sides.push(SideLevel {
                level,
                lateral,
                merge,
                mid: Mid::new(store, &format!("{prefix}.mid"), d, &cfg.dilation_rates, cfg.enable_mid)?,
                predict: PredictBlock::new(store, &format!("{prefix}.predict"), d)?,
            });
        }
        Ok(Self { sides })
    }

    fn forward(&self, ef: &EncoderFeatures<T>, mode: NormMode, size: (usize, usize)) -> Result<StreamOutput<T>> {
        let mut mfs: Vec<Tensor<T>> = Vec::with_capacity(self.sides.len());
        let mut logits = Vec::with_capacity(self.sides.len());
        for side in &self.sides {
            let df = short_connect_merge(side, ef.level(side.level), &mfs, mode)?;
            let mf = side.mid.forward(&df, mode)?;
            logits.push(side.predict.forward(&mf, mode, size)?);
            mfs.push(mf);
        }
        logits.reverse();
        Ok(StreamOutput {
            logits,
            finest: mfs.pop().expect("stream has levels"),
        })
    }
}

/// `DF_i` from `EF_i` and the already computed coarser `MF`s of the same
/// stream. The coarsest level of a stream has no higher inputs.
fn short_connect_merge<T: Real>(
    side: &SideLevel<T>,
    ef: &Tensor<T>,
    higher: &[Tensor<T>],
    mode: NormMode,
) -> Result<Tensor<T>> {
    let Some(lateral) = &side.lateral else {
        return side.merge.forward(ef, mode);
    };
    if higher.is_empty() {
        return Err(Error::invalid(format!(
            "level {} merge needs coarser decoder features",
            side.level
        )));
    }
    let (h, w) = (ef.shape()[2], ef.shape()[3]);
    let mut parts = vec![lateral.forward(ef, mode)?];
    for mf in higher {
        parts.push(resize_bilinear(mf, h, w)?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    side.merge.forward(&concat_channels(&refs)?, mode)
}

struct InteriorStream<T: Real> {
    proj4: ConvBnRelu<T>,
    proj5: ConvBnRelu<T>,
    mid: Mid<T>,
    predict: PredictBlock<T>,
}

impl<T: Real> InteriorStream<T> {
    fn new(store: &mut ParamStore<T>, cfg: &NetworkConfig) -> Result<Self> {
        let d = cfg.decoder_width;
        Ok(Self {
            proj4: ConvBnRelu::same(store, "interior.proj4", cfg.encoder_channels[3], d, 1)?,
            proj5: ConvBnRelu::same(store, "interior.proj5", cfg.encoder_channels[4], d, 1)?,
            mid: Mid::new(store, "interior.mid", d, &cfg.dilation_rates, cfg.enable_mid)?,
            predict: PredictBlock::new(store, "interior.predict", d)?,
        })
    }

    fn forward(&self, ef: &EncoderFeatures<T>, mode: NormMode, size: (usize, usize)) -> Result<Tensor<T>> {
        let e4 = self.proj4.forward(ef.level(4), mode)?;
        let (h, w) = (e4.shape()[2], e4.shape()[3]);
        let e5 = resize_bilinear(&self.proj5.forward(ef.level(5), mode)?, h, w)?;
        let mf = self.mid.forward(&add(&e4, &e5)?, mode)?;
        self.predict.forward(&mf, mode, size)
    }
}

/// All supervised maps of one forward pass, as logits at input resolution.
#[derive(Debug, Clone)]
pub struct PredictionBundle<T: Real> {
    pub interior_map: Option<Tensor<T>>,
    /// One per level, finest first.
    pub boundary_maps: Vec<Tensor<T>>,
    /// Levels 1, 2, 5 in that order.
    pub glass_maps: Vec<Tensor<T>>,
    pub final_map: Tensor<T>,
    /// Finest glass-stream feature before fusion.
    pub glass_feature: Tensor<T>,
    /// Fused boundary logits fed to the mosaic (not supervised).
    pub boundary_fused: Option<Tensor<T>>,
}

impl<T: Real> PredictionBundle<T> {
    pub fn supervised_maps(&self) -> Vec<&Tensor<T>> {
        self.interior_map
            .iter()
            .chain(&self.boundary_maps)
            .chain(&self.glass_maps)
            .chain(std::iter::once(&self.final_map))
            .collect()
    }
}

pub struct GlassNet<T: Real> {
    cfg: NetworkConfig,
    store: ParamStore<T>,
    encoder: Encoder<T>,
    interior: Option<InteriorStream<T>>,
    boundary: Option<Stream<T>>,
    boundary_fuse: Option<Conv<T>>,
    glass: Stream<T>,
    bfm: Option<Bfm<T>>,
    final_predict: PredictBlock<T>,
    // Scratch so repeated eval passes do not disturb training statistics.
    last_mode: RefCell<Option<NormMode>>,
}

impl<T: Real> GlassNet<T> {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let encoder = Encoder::new(&mut store, &cfg.encoder_channels)?;
        let interior = cfg
            .enable_interior_stream
            .then(|| InteriorStream::new(&mut store, &cfg))
            .transpose()?;
        let boundary = cfg
            .enable_boundary_stream
            .then(|| Stream::new(&mut store, "boundary", &[1, 2, 3, 4, 5], &cfg))
            .transpose()?;
        let glass = Stream::new(&mut store, "glass", &GLASS_LEVELS, &cfg)?;
        let boundary_fuse = (cfg.enable_bfm && cfg.enable_boundary_stream)
            .then(|| Conv::new(&mut store, "boundary.fuse", LEVELS, 1, 1))
            .transpose()?;
        let bfm = cfg
            .enable_bfm
            .then(|| Bfm::new(&mut store, "bfm", cfg.decoder_width, cfg.se_reduction))
            .transpose()?;
        let final_predict = PredictBlock::new(&mut store, "final.predict", cfg.decoder_width)?;
        Ok(Self {
            cfg,
            store,
            encoder,
            interior,
            boundary,
            boundary_fuse,
            glass,
            bfm,
            final_predict,
            last_mode: RefCell::new(None),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Configuration, parameters, momentum buffers and running statistics.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        self.cfg.write_meta(&mut ck);
        ck.entries.extend(Checkpoint::from_store(&self.store).entries);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut net = Self::new(NetworkConfig::read_meta(ck)?, 0)?;
        ck.restore_into(&mut net.store)?;
        Ok(net)
    }

    pub fn last_mode(&self) -> Option<NormMode> {
        *self.last_mode.borrow()
    }

    fn check_image(image: &Tensor<T>) -> Result<(usize, usize)> {
        match *image.shape() {
            [_, 3, h, w] if h % INPUT_MULTIPLE == 0 && w % INPUT_MULTIPLE == 0 && h > 0 && w > 0 => Ok((h, w)),
            [_, 3, h, w] => Err(Error::invalid(format!(
                "input {h}x{w} is not a multiple of {INPUT_MULTIPLE}"
            ))),
            _ => Err(Error::ShapeMismatch {
                op: "GlassNet::forward",
                expected: vec![0, 3, 0, 0],
                actual: image.shape().to_vec(),
            }),
        }
    }

    pub fn encoder_forward(&self, image: &Tensor<T>, mode: NormMode) -> Result<EncoderFeatures<T>> {
        Self::check_image(image)?;
        self.encoder.forward(image, mode)
    }

    pub fn forward(&self, image: &Tensor<T>, mode: NormMode) -> Result<PredictionBundle<T>> {
        let size = Self::check_image(image)?;
        *self.last_mode.borrow_mut() = Some(mode);
        let ef = self.encoder.forward(image, mode)?;

        let interior_map = self
            .interior
            .as_ref()
            .map(|s| s.forward(&ef, mode, size))
            .transpose()?;
        let boundary_maps = match &self.boundary {
            Some(s) => s.forward(&ef, mode, size)?.logits,
            None => Vec::new(),
        };
        let glass = self.glass.forward(&ef, mode, size)?;
        let glass_feature = glass.finest;

        let boundary_fused = match &self.boundary_fuse {
            Some(fuse) => {
                let refs: Vec<&Tensor<T>> = boundary_maps.iter().collect();
                Some(fuse.forward(&concat_channels(&refs)?)?)
            }
            None => None,
        };

        let fused = match &self.bfm {
            Some(bfm) => {
                let &[b, _, fh, fw] = glass_feature.shape() else { unreachable!("rank 4") };
                let attention = |logits: Option<&Tensor<T>>| -> Result<Tensor<T>> {
                    match logits {
                        Some(l) => resize_bilinear(&sigmoid(l), fh, fw),
                        None => Ok(Tensor::full(&[b, 1, fh, fw], T::one())),
                    }
                };
                let boundary_att = attention(boundary_fused.as_ref())?;
                let interior_att = attention(interior_map.as_ref())?;
                bfm.forward(&boundary_att, &interior_att, &glass_feature, mode)?
            }
            None => glass_feature.clone(),
        };
        let final_map = self.final_predict.forward(&fused, mode, size)?;

        Ok(PredictionBundle {
            interior_map,
            boundary_maps,
            glass_maps: glass.logits,
            final_map,
            glass_feature,
            boundary_fused,
        })
    }
}
