//! Activation-aware weight quantization with a round-to-nearest baseline.
//!
//! RTN quantizes each group of a row symmetrically against its max. AWQ
//! grid-searches a scalar exponent `alpha`: per-channel equalization scales
//! `s_j = stats_j^alpha` (normalized to geometric mean 1) are applied to the
//! weights before RTN and folded back out at dequantization. The candidate
//! minimizing output error on the calibration batch wins; `alpha = 0` in
//! the grid makes the result never worse than plain RTN on that batch.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor for zero activation statistics, avoiding `0^alpha` singularities.
pub const STATS_FLOOR: f64 = 1e-8;

/// Per-input-channel mean absolute activation over a calibration batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub mean_abs: Vec<f64>,
    pub samples: usize,
}

impl ActivationStats {
    pub fn channels(&self) -> usize {
        self.mean_abs.len()
    }
}

/// `stats_j = mean_i |X[i, j]|` over a (samples x channels) batch.
pub fn collect_stats(calibration: &Array2<f64>) -> Result<ActivationStats, QuantError> {
    if calibration.nrows() == 0 {
        return Err(QuantError::EmptyBatch);
    }
    let samples = calibration.nrows() as f64;
    let mean_abs = calibration
        .columns()
        .into_iter()
        .map(|col| col.iter().map(|v| v.abs()).sum::<f64>() / samples)
        .collect();
    Ok(ActivationStats {
        mean_abs,
        samples: calibration.nrows(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    /// Equalization exponents to try; must contain 0.
    pub alpha_grid: Vec<f64>,
    pub symmetric: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 4,
            group_size: 32,
            // i/20 is correctly rounded, so the grid values print (and
            // round-trip through JSON) as the short decimals 0.05, 0.1, ...
            alpha_grid: (0..=20).map(|i| i as f64 / 20.0).collect(),
            symmetric: true,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<(), QuantError> {
        if ![2, 3, 4, 8].contains(&self.bits) {
            return Err(QuantError::BadBits { bits: self.bits });
        }
        if self.group_size == 0 {
            return Err(QuantError::BadGroupSize);
        }
        // Codes live in the symmetric range by contract; asymmetric
        // quantization has no defined representation here.
        if !self.symmetric {
            return Err(QuantError::AsymmetricUnsupported);
        }
        if !self.alpha_grid.contains(&0.0) {
            return Err(QuantError::GridMissingZero);
        }
        if self.alpha_grid.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(QuantError::GridOutOfRange);
        }
        Ok(())
    }

    /// Largest code magnitude: `2^(b-1) - 1`.
    fn code_max(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }
}

/// Integer codes plus the scales needed to undo quantization.
///
/// Dequantization of element (r, c) is
/// `codes[r, c] * group_scales[r, c / g] / eq_scales[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Array2<i8>,
    /// rows x ceil(d_in / g) quantization step sizes, all > 0.
    pub group_scales: Array2<f64>,
    /// Per-channel equalization scales folded into the codes; all 1 for RTN.
    pub eq_scales: Vec<f64>,
    pub bits: u8,
    pub group_size: usize,
}

impl QuantizedTensor {
    pub fn shape(&self) -> (usize, usize) {
        self.codes.dim()
    }

    /// Reconstructs the approximation of the original weights.
    pub fn dequantize(&self) -> Array2<f64> {
        let (rows, cols) = self.codes.dim();
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            self.codes[[r, c]] as f64 * self.group_scales[[r, c / self.group_size]]
                / self.eq_scales[c]
        })
    }
}

/// Round-to-nearest baseline: per (row, group) symmetric max scaling.
pub fn rtn_quantize(weights: &Array2<f64>, cfg: &QuantConfig) -> Result<QuantizedTensor, QuantError> {
    cfg.validate()?;
    let mut q = quantize_scaled(weights, cfg);
    q.eq_scales = vec![1.0; weights.ncols()];
    Ok(q)
}

/// Quantizes a (possibly pre-scaled) matrix; eq_scales left as ones.
fn quantize_scaled(weights: &Array2<f64>, cfg: &QuantConfig) -> QuantizedTensor {
    let (rows, cols) = weights.dim();
    let groups = cols.div_ceil(cfg.group_size);
    let code_max = cfg.code_max() as f64;
    let mut codes = Array2::<i8>::zeros((rows, cols));
    let mut group_scales = Array2::<f64>::zeros((rows, groups));

    for r in 0..rows {
        for g in 0..groups {
            let lo = g * cfg.group_size;
            let hi = ((g + 1) * cfg.group_size).min(cols);
            let max_abs = (lo..hi)
                .map(|c| weights[[r, c]].abs())
                .fold(0.0f64, f64::max);
            // All-zero groups quantize to zero codes with a unit scale.
            let scale = if max_abs == 0.0 { 1.0 } else { max_abs / code_max };
            group_scales[[r, g]] = scale;
            for c in lo..hi {
                let code = (weights[[r, c]] / scale).round();
                codes[[r, c]] = code.clamp(-code_max, code_max) as i8;
            }
        }
    }
    QuantizedTensor {
        codes,
        group_scales,
        eq_scales: vec![1.0; cols],
        bits: cfg.bits,
        group_size: cfg.group_size,
    }
}

/// Output-space reconstruction error of a quantized tensor on a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionError {
    /// `|| dequant(Q) Xᵀ - W Xᵀ ||_F`
    pub absolute: f64,
    /// Absolute error relative to `|| W Xᵀ ||_F`.
    pub relative: f64,
}

/// Frobenius error between the quantized and exact outputs on `X`
/// (samples x channels).
pub fn reconstruction_error(
    weights: &Array2<f64>,
    quantized: &QuantizedTensor,
    calibration: &Array2<f64>,
) -> Result<ReconstructionError, QuantError> {
    if quantized.shape() != weights.dim() || calibration.ncols() != weights.ncols() {
        return Err(QuantError::ShapeMismatch {
            weights: weights.dim(),
            quantized: quantized.shape(),
            channels: calibration.ncols(),
        });
    }
    let exact = weights.dot(&calibration.t());
    let approx = quantized.dequantize().dot(&calibration.t());
    let absolute = frobenius(&(&approx - &exact));
    let reference = frobenius(&exact);
    Ok(ReconstructionError {
        absolute,
        relative: if reference == 0.0 {
            0.0
        } else {
            absolute / reference
        },
    })
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Outcome of the AWQ grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct AwqResult {
    pub tensor: QuantizedTensor,
    pub alpha: f64,
    pub error: ReconstructionError,
    /// Channels whose statistic was floored at [`STATS_FLOOR`].
    pub floored_channels: usize,
}

/// Grid-searches the equalization exponent and returns the candidate with
/// the lowest calibration error; ties resolve to the smaller alpha.
pub fn awq_quantize(
    weights: &Array2<f64>,
    stats: &ActivationStats,
    cfg: &QuantConfig,
    calibration: &Array2<f64>,
) -> Result<AwqResult, QuantError> {
    cfg.validate()?;
    if stats.channels() != weights.ncols() {
        return Err(QuantError::StatsChannelMismatch {
            stats: stats.channels(),
            weights: weights.ncols(),
        });
    }
    let floored_channels = stats.mean_abs.iter().filter(|&&s| s < STATS_FLOOR).count();
    if floored_channels > 0 {
        log::warn!(
            "{floored_channels} activation channels at zero; flooring stats at {STATS_FLOOR}"
        );
    }
    let floored: Vec<f64> = stats.mean_abs.iter().map(|&s| s.max(STATS_FLOOR)).collect();

    let mut best: Option<AwqResult> = None;
    for &alpha in &cfg.alpha_grid {
        let raw: Vec<f64> = floored.iter().map(|&s| s.powf(alpha)).collect();
        // Normalize to geometric mean 1 so equalization never changes the
        // overall weight magnitude.
        let log_mean = raw.iter().map(|s| s.ln()).sum::<f64>() / raw.len() as f64;
        let norm = log_mean.exp();
        let eq_scales: Vec<f64> = raw.iter().map(|&s| s / norm).collect();

        let scaled = scale_columns(weights, &eq_scales);
        let mut tensor = quantize_scaled(&scaled, cfg);
        tensor.eq_scales = eq_scales;
        let error = reconstruction_error(weights, &tensor, calibration)?;

        let better = match &best {
            None => true,
            Some(b) => {
                error.absolute < b.error.absolute
                    || (error.absolute == b.error.absolute && alpha < b.alpha)
            }
        };
        if better {
            best = Some(AwqResult {
                tensor,
                alpha,
                error,
                floored_channels,
            });
        }
    }
    Ok(best.expect("alpha grid is non-empty"))
}

fn scale_columns(weights: &Array2<f64>, scales: &[f64]) -> Array2<f64> {
    let mut scaled = weights.clone();
    for (c, &s) in scales.iter().enumerate() {
        scaled.column_mut(c).mapv_inplace(|w| w * s);
    }
    scaled
}

/// Applies equalization, skips quantization, and folds the scales back out;
/// in exact arithmetic this reproduces `W Xᵀ`. Used to validate that the
/// equalization pipeline is output-invariant.
pub fn equalization_identity_error(weights: &Array2<f64>, scales: &[f64], x: &Array2<f64>) -> f64 {
    let scaled = scale_columns(weights, scales);
    let inverse: Vec<f64> = scales.iter().map(|&s| 1.0 / s).collect();
    let back = scale_columns(&scaled, &inverse);
    frobenius(&(&back.dot(&x.t()) - &weights.dot(&x.t())))
}

const MAGIC: &[u8; 8] = b"DSQTENS1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    rows: usize,
    cols: usize,
    bits: u8,
    group_size: usize,
}

/// Writes the tensor: JSON header, bit-packed codes (offset to unsigned),
/// then group and equalization scales as little-endian f64.
pub fn save_tensor(tensor: &QuantizedTensor, path: &Path) -> Result<(), QuantError> {
    let (rows, cols) = tensor.shape();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    let header = serde_json::to_vec(&TensorHeader {
        rows,
        cols,
        bits: tensor.bits,
        group_size: tensor.group_size,
    })
    .unwrap();
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;

    // Pack codes offset by code_max into b-bit fields of a little-endian
    // bit stream.
    let offset = (1i32 << (tensor.bits - 1)) - 1;
    let bits = tensor.bits as usize;
    let total_bits = rows * cols * bits;
    let mut packed = vec![0u8; total_bits.div_ceil(8)];
    for (i, &code) in tensor.codes.iter().enumerate() {
        let value = (code as i32 + offset) as u32;
        let bit_pos = i * bits;
        for b in 0..bits {
            if value & (1 << b) != 0 {
                packed[(bit_pos + b) / 8] |= 1 << ((bit_pos + b) % 8);
            }
        }
    }
    out.write_all(&packed)?;
    for &s in tensor.group_scales.iter() {
        out.write_all(&s.to_le_bytes())?;
    }
    for &s in &tensor.eq_scales {
        out.write_all(&s.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<QuantizedTensor, QuantError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(QuantError::BadFileFormat {
            reason: "bad magic".to_string(),
        });
    }
    let mut len_bytes = [0u8; 4];
    input.read_exact(&mut len_bytes)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    input.read_exact(&mut header_bytes)?;
    let header: TensorHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| QuantError::BadFileFormat {
            reason: e.to_string(),
        })?;

    let bits = header.bits as usize;
    let total_bits = header.rows * header.cols * bits;
    let mut packed = vec![0u8; total_bits.div_ceil(8)];
    input.read_exact(&mut packed)?;
    let offset = (1i32 << (header.bits - 1)) - 1;
    let mut codes = Array2::<i8>::zeros((header.rows, header.cols));
    for (i, code) in codes.iter_mut().enumerate() {
        let bit_pos = i * bits;
        let mut value = 0u32;
        for b in 0..bits {
            if packed[(bit_pos + b) / 8] & (1 << ((bit_pos + b) % 8)) != 0 {
                value |= 1 << b;
            }
        }
        *code = (value as i32 - offset) as i8;
    }

    let groups = header.cols.div_ceil(header.group_size);
    let mut read_f64 = |n: usize| -> Result<Vec<f64>, QuantError> {
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        Ok(values)
    };
    let group_scales =
        Array2::from_shape_vec((header.rows, groups), read_f64(header.rows * groups)?)
            .map_err(|e| QuantError::BadFileFormat {
                reason: e.to_string(),
            })?;
    let eq_scales = read_f64(header.cols)?;

    Ok(QuantizedTensor {
        codes,
        group_scales,
        eq_scales,
        bits: header.bits,
        group_size: header.group_size,
    })
}

/// One row of the RTN-vs-AWQ benchmark CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub instance: usize,
    pub rtn_error: f64,
    pub awq_error: f64,
    pub alpha: f64,
}

/// Quantizes one instance both ways on the same calibration batch.
pub fn benchmark_instance(
    instance: usize,
    weights: &Array2<f64>,
    calibration: &Array2<f64>,
    cfg: &QuantConfig,
) -> Result<BenchmarkRow, QuantError> {
    let stats = collect_stats(calibration)?;
    let rtn = rtn_quantize(weights, cfg)?;
    let rtn_error = reconstruction_error(weights, &rtn, calibration)?;
    let awq = awq_quantize(weights, &stats, cfg, calibration)?;
    Ok(BenchmarkRow {
        instance,
        rtn_error: rtn_error.absolute,
        awq_error: awq.error.absolute,
        alpha: awq.alpha,
    })
}

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("calibration batch is empty")]
    EmptyBatch,
    #[error("unsupported bit width {bits}; use 2, 3, 4, or 8")]
    BadBits { bits: u8 },
    #[error("group size must be positive")]
    BadGroupSize,
    #[error("asymmetric quantization is not supported; codes are symmetric by contract")]
    AsymmetricUnsupported,
    #[error("alpha grid must contain 0")]
    GridMissingZero,
    #[error("alpha grid values must lie in [0, 1]")]
    GridOutOfRange,
    #[error("activation stats cover {stats} channels but weights have {weights}")]
    StatsChannelMismatch { stats: usize, weights: usize },
    #[error("shape mismatch: weights {weights:?}, quantized {quantized:?}, calibration channels {channels}")]
    ShapeMismatch {
        weights: (usize, usize),
        quantized: (usize, usize),
        channels: usize,
    },
    #[error("quantized tensor file malformed: {reason}")]
    BadFileFormat { reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
