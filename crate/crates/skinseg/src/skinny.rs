//! "Skinny-lite": a configurable lightweight U-Net.
//!
//! Encoder/decoder blocks are either a plain double 3x3 convolution or an
//! inception block (parallel 1x1 / 3x3 / 5x5 branches concatenated). The
//! dense flag concatenates the block input to the block output; whenever a
//! block's raw output is wider than its nominal width, a channel-reducing
//! 1x1 convolution brings it back. Levels are joined by 2x2 max-pooling on
//! the way down and nearest-neighbor upsampling plus skip concatenation on
//! the way up; the head is a 1x1 convolution into a sigmoid.
//!
//! `levels = 6, base_channels = 16` reaches U-Net scale (~7.9M parameters);
//! the desk-scale default is `levels = 3, base_channels = 16`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayes::ProbMap;
use crate::imgio::{Image, ImgError};
use crate::nncore::{Graph, NnError, NodeId, ParamStore, Real, Tensor};
use crate::rng;

#[derive(Debug, Error)]
pub enum SkinnyError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("input {h}x{w} is smaller than the network stride {min}")]
    InputTooSmall { h: usize, w: usize, min: usize },
    #[error("weight file: {0}")]
    Format(String),
    #[error("weight file truncated in slot {0}")]
    SlotTruncated(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture description; weights are derivable from this plus the seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub inception: bool,
    pub dense: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { in_channels: 3, levels: 3, base_channels: 16, inception: false, dense: false, seed: 0 }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), SkinnyError> {
        if self.in_channels < 1 {
            return Err(SkinnyError::Config("in_channels must be >= 1".into()));
        }
        if self.levels < 1 {
            return Err(SkinnyError::Config("levels must be >= 1".into()));
        }
        if self.base_channels < 1 {
            return Err(SkinnyError::Config("base_channels must be >= 1".into()));
        }
        // width doubling per level must not overflow
        if self.levels > 16 {
            return Err(SkinnyError::Config("levels must be <= 16".into()));
        }
        Ok(())
    }

    /// Input dims must be multiples of this; smaller inputs are reflected up.
    pub fn stride(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Architecture plus learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub config: NetworkConfig,
    pub params: ParamStore<f32>,
}

fn conv_slot(name: String, c_out: usize, c_in: usize, k: usize, out: &mut Vec<(String, Vec<usize>)>) {
    out.push((format!("{name}.w"), vec![c_out, c_in, k, k]));
    out.push((format!("{name}.b"), vec![c_out]));
}

fn block_slots(cfg: &NetworkConfig, prefix: &str, c_in: usize, width: usize, out: &mut Vec<(String, Vec<usize>)>) {
    let raw_out = if cfg.inception {
        conv_slot(format!("{prefix}.i1"), width, c_in, 1, out);
        conv_slot(format!("{prefix}.i3"), width, c_in, 3, out);
        conv_slot(format!("{prefix}.i5"), width, c_in, 5, out);
        3 * width
    } else {
        conv_slot(format!("{prefix}.c1"), width, c_in, 3, out);
        conv_slot(format!("{prefix}.c2"), width, width, 3, out);
        width
    };
    let cat = if cfg.dense { raw_out + c_in } else { raw_out };
    if cat != width {
        conv_slot(format!("{prefix}.red"), width, cat, 1, out);
    }
}

/// Slot names and dims, in serialization order, derived from config alone.
pub fn slot_layout(cfg: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut c_in = cfg.in_channels;
    for level in 0..cfg.levels {
        block_slots(cfg, &format!("enc{level}"), c_in, cfg.width(level), &mut out);
        c_in = cfg.width(level);
    }
    for level in (0..cfg.levels.saturating_sub(1)).rev() {
        let cat_in = cfg.width(level + 1) + cfg.width(level);
        block_slots(cfg, &format!("dec{level}"), cat_in, cfg.width(level), &mut out);
    }
    conv_slot("head".to_string(), 1, cfg.width(0), 1, &mut out);
    out
}

/// Exact learnable-parameter count for a config.
pub fn count_params(cfg: &NetworkConfig) -> usize {
    slot_layout(cfg).iter().map(|(_, dims)| dims.iter().product::<usize>()).sum()
}

/// He-uniform initialized weights, zero biases, deterministic in the seed.
pub fn build(cfg: &NetworkConfig) -> Result<WeightStore, SkinnyError> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, "init", 0);
    let mut params = ParamStore::new();
    for (name, dims) in slot_layout(cfg) {
        let n: usize = dims.iter().product();
        let data = if dims.len() == 4 {
            let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
            let limit = (6.0 / fan_in).sqrt() as f32;
            (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
        } else {
            vec![0.0f32; n]
        };
        params.add_slot(name, dims, data)?;
    }
    Ok(WeightStore { config: cfg.clone(), params })
}

fn append_conv<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    name: &str,
    x: NodeId,
) -> Result<NodeId, NnError> {
    let w = params.lookup(&format!("{name}.w"))?;
    let b = params.lookup(&format!("{name}.b"))?;
    g.conv2d(x, params, w, b)
}

fn append_block<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    cfg: &NetworkConfig,
    prefix: &str,
    x: NodeId,
    width: usize,
) -> Result<NodeId, NnError> {
    let raw = if cfg.inception {
        let b1 = append_conv(g, params, &format!("{prefix}.i1"), x)?;
        let b1 = g.relu(b1);
        let b3 = append_conv(g, params, &format!("{prefix}.i3"), x)?;
        let b3 = g.relu(b3);
        let b5 = append_conv(g, params, &format!("{prefix}.i5"), x)?;
        let b5 = g.relu(b5);
        let cat = g.concat_channels(b1, b3)?;
        g.concat_channels(cat, b5)?
    } else {
        let c1 = append_conv(g, params, &format!("{prefix}.c1"), x)?;
        let c1 = g.relu(c1);
        let c2 = append_conv(g, params, &format!("{prefix}.c2"), c1)?;
        g.relu(c2)
    };
    let cat = if cfg.dense { g.concat_channels(raw, x)? } else { raw };
    if g.shape(cat).0 != width {
        let red = append_conv(g, params, &format!("{prefix}.red"), cat)?;
        Ok(g.relu(red))
    } else {
        Ok(cat)
    }
}

/// Appends the whole network to a graph; returns (input node, sigmoid output).
/// `h` and `w` must be multiples of the config stride.
pub fn append_network<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    cfg: &NetworkConfig,
    h: usize,
    w: usize,
) -> Result<(NodeId, NodeId), SkinnyError> {
    cfg.validate()?;
    let stride = cfg.stride();
    if h % stride != 0 || w % stride != 0 || h < stride || w < stride {
        return Err(SkinnyError::InputTooSmall { h, w, min: stride });
    }
    let input = g.input(cfg.in_channels, h, w);
    let mut x = input;
    let mut skips = Vec::with_capacity(cfg.levels.saturating_sub(1));
    for level in 0..cfg.levels {
        x = append_block(g, params, cfg, &format!("enc{level}"), x, cfg.width(level))?;
        if level + 1 < cfg.levels {
            skips.push(x);
            x = g.maxpool2(x)?;
        }
    }
    for level in (0..cfg.levels.saturating_sub(1)).rev() {
        let up = g.upsample2(x);
        let cat = g.concat_channels(up, skips[level])?;
        x = append_block(g, params, cfg, &format!("dec{level}"), cat, cfg.width(level))?;
    }
    let head = append_conv(g, params, "head", x)?;
    Ok((input, g.sigmoid(head)))
}

/// Reflected (symmetric, no edge repeat) index for bottom/right padding.
#[inline]
fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * n - 2 - i
    }
}

/// Planar CHW tensor from an interleaved image, reflect-padded to (ph, pw).
pub fn image_to_tensor<T: Real>(img: &Image, ph: usize, pw: usize) -> Tensor<T> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    debug_assert!(ph >= h && pw >= w && ph < 2 * h && pw < 2 * w);
    let mut data = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                let sx = reflect(x, w);
                data.push(T::from_f64_lossy(f64::from(img.get(sy, sx, ch))));
            }
        }
    }
    Tensor::new(c, ph, pw, data).expect("image values are finite and in range")
}

fn round_up(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Full inference: pad to the network stride, run the graph, crop back.
pub fn forward(weights: &WeightStore, img: &Image) -> Result<ProbMap, SkinnyError> {
    let cfg = &weights.config;
    if img.channels() != cfg.in_channels {
        return Err(SkinnyError::ChannelMismatch { expected: cfg.in_channels, got: img.channels() });
    }
    let stride = cfg.stride();
    if img.height() < stride || img.width() < stride {
        return Err(SkinnyError::InputTooSmall { h: img.height(), w: img.width(), min: stride });
    }
    let ph = round_up(img.height(), stride);
    let pw = round_up(img.width(), stride);
    let mut g = Graph::new();
    let (input, output) = append_network(&mut g, &weights.params, cfg, ph, pw)?;
    let t = image_to_tensor::<f32>(img, ph, pw);
    g.forward(&weights.params, &[(input, &t)])?;
    let out = g.activation(output).expect("forward cached");
    let plane = out.plane(0);
    let mut values = Vec::with_capacity(img.pixel_count());
    for y in 0..img.height() {
        values.extend_from_slice(&plane[y * pw..y * pw + img.width()]);
    }
    ProbMap::new(img.height(), img.width(), values).map_err(SkinnyError::Format)
}

const WEIGHT_MAGIC: &[u8; 4] = b"SKNW";
const WEIGHT_VERSION: u32 = 1;

/// Weight file layout: magic, version (u32 LE), length-prefixed JSON config,
/// then per slot in layout order: name length (u32 LE), name, element count
/// (u64 LE), little-endian f32 values.
pub fn save_weights(weights: &WeightStore, path: &Path) -> Result<(), SkinnyError> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    let cfg_json = serde_json::to_vec(&weights.config).map_err(|e| SkinnyError::Format(e.to_string()))?;
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg_json);
    for slot in weights.params.slots() {
        out.extend_from_slice(&(slot.name.len() as u32).to_le_bytes());
        out.extend_from_slice(slot.name.as_bytes());
        out.extend_from_slice(&(slot.data.len() as u64).to_le_bytes());
        for &v in &slot.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<WeightStore, SkinnyError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;

    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8], SkinnyError> {
        let slice = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| SkinnyError::SlotTruncated(what.to_string()))?;
        *pos += n;
        Ok(slice)
    };

    if take(&mut pos, 4, "header")? != WEIGHT_MAGIC {
        return Err(SkinnyError::Format("bad magic, expected SKNW".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4, "header")?.try_into().unwrap());
    if version != WEIGHT_VERSION {
        return Err(SkinnyError::Format(format!("unsupported version {version}")));
    }
    let cfg_len = u32::from_le_bytes(take(&mut pos, 4, "header")?.try_into().unwrap()) as usize;
    let cfg: NetworkConfig = serde_json::from_slice(take(&mut pos, cfg_len, "config")?)
        .map_err(|e| SkinnyError::Format(format!("config block: {e}")))?;
    cfg.validate()?;

    let mut params = ParamStore::new();
    for (name, dims) in slot_layout(&cfg) {
        let name_len =
            u32::from_le_bytes(take(&mut pos, 4, &name)?.try_into().unwrap()) as usize;
        let file_name = String::from_utf8(take(&mut pos, name_len, &name)?.to_vec())
            .map_err(|_| SkinnyError::Format(format!("slot name for {name} is not utf-8")))?;
        if file_name != name {
            return Err(SkinnyError::Format(format!(
                "config mismatch: expected slot {name}, file has {file_name}"
            )));
        }
        let count = u64::from_le_bytes(take(&mut pos, 8, &name)?.try_into().unwrap()) as usize;
        let expected: usize = dims.iter().product();
        if count != expected {
            return Err(SkinnyError::Format(format!(
                "config mismatch: slot {name} has {count} values, expected {expected}"
            )));
        }
        let raw = take(&mut pos, count * 4, &name)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.add_slot(name, dims, data)?;
    }
    if pos != bytes.len() {
        return Err(SkinnyError::Format(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(WeightStore { config: cfg, params })
}

/// Parses `levels=3,base=16,inception=true,dense=false` (any subset, any
/// order) on top of the default config.
pub fn parse_arch(spec: &str) -> Result<NetworkConfig, SkinnyError> {
    let mut cfg = NetworkConfig::default();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| SkinnyError::Config(format!("arch field `{part}` is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "levels" => {
                cfg.levels = value
                    .parse()
                    .map_err(|e| SkinnyError::Config(format!("levels={value}: {e}")))?;
            }
            "base" => {
                cfg.base_channels = value
                    .parse()
                    .map_err(|e| SkinnyError::Config(format!("base={value}: {e}")))?;
            }
            "inception" => {
                cfg.inception = value
                    .parse()
                    .map_err(|e| SkinnyError::Config(format!("inception={value}: {e}")))?;
            }
            "dense" => {
                cfg.dense = value
                    .parse()
                    .map_err(|e| SkinnyError::Config(format!("dense={value}: {e}")))?;
            }
            _ => return Err(SkinnyError::Config(format!("unknown arch field `{key}`"))),
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::synth::generate_synthetic_dataset;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig { in_channels: 1, levels: 2, base_channels: 2, seed: 5, ..Default::default() }
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let cfg = tiny_cfg();
        let a = build(&cfg).unwrap();
        let b = build(&cfg).unwrap();
        assert_eq!(a.params, b.params);
        let c = build(&NetworkConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn minimal_config_param_count_matches_hand_sum() {
        // levels=1 base=1 in=1 plain:
        //   enc0.c1 [1,1,3,3]+[1] = 10, enc0.c2 [1,1,3,3]+[1] = 10,
        //   head    [1,1,1,1]+[1] = 2           -> 22
        let cfg = NetworkConfig {
            in_channels: 1,
            levels: 1,
            base_channels: 1,
            inception: false,
            dense: false,
            seed: 0,
        };
        assert_eq!(count_params(&cfg), 22);
        let ws = build(&cfg).unwrap();
        assert_eq!(ws.params.total_count(), 22);
    }

    #[test]
    fn single_conv_slot_size() {
        // one 3x3 conv, in=1, out=2, bias: 3*3*1*2 + 2 = 20
        let mut out = Vec::new();
        conv_slot("c".into(), 2, 1, 3, &mut out);
        let total: usize = out.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
        assert_eq!(total, 20);
    }

    #[test]
    fn paper_scale_count_is_unet_order() {
        let cfg = NetworkConfig { in_channels: 3, levels: 6, base_channels: 16, ..Default::default() };
        let n = count_params(&cfg);
        assert!((1_000_000..=100_000_000).contains(&n), "{n}");
        // frozen exact value, also quoted in the README
        assert_eq!(n, 7_862_401);
    }

    #[test]
    fn doubling_base_roughly_quadruples_params() {
        let a = NetworkConfig { levels: 4, base_channels: 8, ..Default::default() };
        let b = NetworkConfig { levels: 4, base_channels: 16, ..Default::default() };
        let ratio = count_params(&b) as f64 / count_params(&a) as f64;
        assert!((ratio - 4.0).abs() / 4.0 < 0.2, "ratio {ratio}");
    }

    #[test]
    fn in_channels_affects_only_first_conv_shape() {
        let rgb = NetworkConfig { in_channels: 3, ..tiny_cfg() };
        let gs = NetworkConfig { in_channels: 1, ..tiny_cfg() };
        let la = slot_layout(&rgb);
        let lb = slot_layout(&gs);
        assert_eq!(la.len(), lb.len());
        for ((na, da), (nb, db)) in la.iter().zip(&lb) {
            assert_eq!(na, nb);
            if na == "enc0.c1.w" {
                assert_eq!(da[1], 3);
                assert_eq!(db[1], 1);
            } else {
                assert_eq!(da, db);
            }
        }
    }

    #[test]
    fn forward_preserves_dims_and_range() {
        let cfg = NetworkConfig { in_channels: 3, levels: 3, base_channels: 4, seed: 1, ..Default::default() };
        let ws = build(&cfg).unwrap();
        let img = &generate_synthetic_dataset(1, 64, 2).unwrap()[0].image;
        let map = forward(&ws, img).unwrap();
        assert_eq!((map.height(), map.width()), (64, 64));
        assert!(map.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_pads_odd_sizes() {
        let cfg = NetworkConfig { in_channels: 1, levels: 3, base_channels: 2, seed: 3, ..Default::default() };
        let ws = build(&cfg).unwrap();
        let data: Vec<f32> = (0..70 * 70).map(|i| (i % 71) as f32 / 70.0).collect();
        let img = Image::new(70, 70, 1, data).unwrap();
        let map = forward(&ws, &img).unwrap();
        assert_eq!((map.height(), map.width()), (70, 70));
        // next multiple of the stride (4) above 70 is 72
        assert_eq!(round_up(70, cfg.stride()), 72);
    }

    #[test]
    fn forward_rejects_channel_mismatch_and_small_inputs() {
        let ws = build(&tiny_cfg()).unwrap();
        let rgb = Image::new(8, 8, 3, vec![0.5; 192]).unwrap();
        assert!(matches!(forward(&ws, &rgb), Err(SkinnyError::ChannelMismatch { .. })));
        let tiny = Image::new(1, 1, 1, vec![0.5]).unwrap();
        assert!(matches!(forward(&ws, &tiny), Err(SkinnyError::InputTooSmall { .. })));
    }

    #[test]
    fn inception_and_dense_blocks_build_and_run() {
        for (inception, dense) in [(true, false), (false, true), (true, true)] {
            let cfg = NetworkConfig {
                in_channels: 3,
                levels: 2,
                base_channels: 2,
                inception,
                dense,
                seed: 9,
            };
            let ws = build(&cfg).unwrap();
            assert_eq!(ws.params.total_count(), count_params(&cfg));
            let img = Image::new(8, 8, 3, vec![0.25; 192]).unwrap();
            let map = forward(&ws, &img).unwrap();
            assert_eq!((map.height(), map.width()), (8, 8));
        }
    }

    #[test]
    fn weights_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sknw");
        let ws = build(&tiny_cfg()).unwrap();
        save_weights(&ws, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(ws.config, back.config);
        assert_eq!(ws.params, back.params);
    }

    #[test]
    fn weight_file_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sknw");
        let ws = build(&tiny_cfg()).unwrap();
        save_weights(&ws, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, [b"XXXX".as_slice(), &bytes[4..]].concat()).unwrap();
        assert!(matches!(load_weights(&path), Err(SkinnyError::Format(_))));

        // drop the tail: the error names the slot where data ran out
        std::fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        match load_weights(&path) {
            Err(SkinnyError::SlotTruncated(slot)) => assert_eq!(slot, "head.b"),
            other => panic!("expected slot truncation, got {other:?}"),
        }
    }

    #[test]
    fn arch_string_round_trip() {
        let cfg = parse_arch("levels=4,base=8,inception=true,dense=true").unwrap();
        assert_eq!(cfg.levels, 4);
        assert_eq!(cfg.base_channels, 8);
        assert!(cfg.inception && cfg.dense);
        assert!(parse_arch("bogus=1").is_err());
        assert!(parse_arch("levels").is_err());
    }
}
