//! End-to-end run: decorrelate the frame representatives, condition the
//! token matrix per frame, then drive a deterministic toy denoiser (one
//! cross-attention block with a linear readout) for T steps and decode.
//!
//! Randomness is confined to one SplitMix64 stream per run, seeded with
//! `config.seed`, consumed in this order: query projection, key
//! projection, value projection, readout (all uniform in [-1, 1)), then
//! the initial latent(s) as standard Gaussians. See [`crate::rng`] for the
//! exact generator contract.

use crate::decorrelation::{
    inject_decorrelated, modified_gram_schmidt, DecorrelatedFrameMatrix, DecorrelationParams,
};
use crate::error::{Error, Result};
use crate::ipca::{
    ipca_attention, project_kv, scaled_dot_attention, AttentionBatch, AttentionWeights,
};
use crate::layout::{extract_frame_matrix, PromptLayout, TokenEmbeddingMatrix};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::svr::{assemble_conditioned, ConditionedMatrix, SvrParams};

/// Everything a run needs besides the embeddings themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig<T> {
    pub svr: SvrParams<T>,
    pub decorrelation: DecorrelationParams<T>,
    /// Denoising steps T ≥ 1.
    pub steps: usize,
    pub seed: u64,
    /// Size of the latent vector, ≥ 1.
    pub latent_dim: usize,
    /// Step size η > 0.
    pub step_size: T,
    /// Query rows Lq of the toy denoiser.
    pub n_queries: usize,
    /// Key/query dimension d of the toy denoiser.
    pub attn_dim: usize,
    pub enable_gs: bool,
    pub enable_svr: bool,
    pub enable_ipca: bool,
    /// Run per-frame conditioning on one thread per frame; output is
    /// bitwise identical to the sequential order.
    pub parallel_frames: bool,
    /// Draw a fresh initial latent per frame instead of sharing one.
    pub per_frame_noise: bool,
}

impl<T: Real> Default for PipelineConfig<T> {
    fn default() -> Self {
        Self {
            svr: SvrParams::default(),
            decorrelation: DecorrelationParams::default(),
            steps: 10,
            seed: 0,
            latent_dim: 4,
            step_size: T::from_f64(0.1),
            n_queries: 4,
            attn_dim: 8,
            enable_gs: true,
            enable_svr: true,
            enable_ipca: true,
            parallel_frames: false,
            per_frame_noise: false,
        }
    }
}

impl<T: Real> PipelineConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.svr.validate()?;
        self.decorrelation.validate()?;
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be >= 1".into()));
        }
        if self.n_queries == 0 || self.attn_dim == 0 {
            return Err(Error::InvalidArgument(
                "query count and attention dim must be >= 1".into(),
            ));
        }
        let eta = self.step_size.to_f64();
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step size {} must be positive and finite",
                eta
            )));
        }
        Ok(())
    }
}

/// Latent vector plus its remaining-step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<T> {
    z: Vec<T>,
    t: usize,
}

impl<T: Real> LatentState<T> {
    pub fn new(z: Vec<T>, t: usize) -> Result<Self> {
        if let Some(pos) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEntry { row: 0, col: pos });
        }
        Ok(Self { z, t })
    }

    pub fn z(&self) -> &[T] {
        &self.z
    }

    pub fn remaining_steps(&self) -> usize {
        self.t
    }

    pub fn norm(&self) -> f64 {
        crate::matrix::norm(&self.z)
    }
}

/// Weights of the toy denoiser: latent-to-queries projection, the shared
/// cross-attention projections, and the readout back to latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiserWeights<T> {
    /// `(Lq·d) × latent_dim`; queries are the reshaped product with z.
    w_q: Matrix<T>,
    attention: AttentionWeights<T>,
    /// `latent_dim × d` readout.
    w_out: Matrix<T>,
    n_queries: usize,
    attn_dim: usize,
}

impl<T: Real> ToyDenoiserWeights<T> {
    /// Draws all weights from `stream` in the documented order
    /// (W_Q, W_K, W_V, W_out), uniform in [-1, 1).
    pub fn from_stream(
        stream: &mut SplitMix64,
        latent_dim: usize,
        n_queries: usize,
        attn_dim: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        let uniform =
            |rng: &mut SplitMix64, rows: usize, cols: usize| -> Result<Matrix<T>> {
                let data = rng
                    .pm1_vec(rows * cols)
                    .into_iter()
                    .map(T::from_f64)
                    .collect();
                Matrix::new(rows, cols, data)
            };
        let w_q = uniform(stream, n_queries * attn_dim, latent_dim)?;
        let w_k = uniform(stream, embed_dim, attn_dim)?;
        let w_v = uniform(stream, embed_dim, attn_dim)?;
        let w_out = uniform(stream, latent_dim, attn_dim)?;
        Ok(Self {
            w_q,
            attention: AttentionWeights::new(w_k, w_v)?,
            w_out,
            n_queries,
            attn_dim,
        })
    }

    pub fn from_seed(
        seed: u64,
        latent_dim: usize,
        n_queries: usize,
        attn_dim: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        let mut stream = SplitMix64::new(seed);
        Self::from_stream(&mut stream, latent_dim, n_queries, attn_dim, embed_dim)
    }

    pub fn attention(&self) -> &AttentionWeights<T> {
        &self.attention
    }
}

/// One denoising step: queries from the latent, keys/values from the
/// conditioned matrix, attention (augmented or plain), mean over query
/// rows, linear readout, gradient-style update
/// `z ← z − η · W_out · mean(Out)`. The step counter decrements.
pub fn toy_denoise_step<T: Real>(
    state: &LatentState<T>,
    conditioned: &ConditionedMatrix<T>,
    weights: &ToyDenoiserWeights<T>,
    layout: &PromptLayout,
    step_size: T,
    use_ipca: bool,
) -> Result<LatentState<T>> {
    if state.t == 0 {
        return Err(Error::InvalidArgument(
            "step counter already at zero".into(),
        ));
    }
    let q_flat = weights.w_q.matvec(&state.z)?;
    let q = Matrix::new(weights.n_queries, weights.attn_dim, q_flat)?;
    let (k, v) = project_kv(conditioned, &weights.attention)?;
    let out = if use_ipca {
        let batch = AttentionBatch::masked(q, k, v, layout)?;
        ipca_attention(&batch)?
    } else {
        scaled_dot_attention(&q, &k, &v)?
    };

    // Mean over query rows, f64 accumulation in fixed order.
    let lq = out.nrows() as f64;
    let pooled: Vec<T> = (0..out.ncols())
        .map(|c| {
            let mut acc = 0.0f64;
            for r in 0..out.nrows() {
                acc += out.get(r, c).to_f64();
            }
            T::from_f64(acc / lq)
        })
        .collect();
    let delta = weights.w_out.matvec(&pooled)?;
    let eta = step_size.to_f64();
    let z_next: Vec<T> = state
        .z
        .iter()
        .zip(&delta)
        .map(|(z, d)| T::from_f64(z.to_f64() - eta * d.to_f64()))
        .collect();
    LatentState::new(z_next, state.t - 1)
}

/// Identity readout standing in for a decoder; requires the step counter
/// to have reached zero.
pub fn toy_decode<T: Real>(state: &LatentState<T>) -> Result<Vec<T>> {
    if state.t != 0 {
        return Err(Error::StepsRemaining(state.t));
    }
    Ok(state.z.clone())
}

/// Result of denoising one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput<T> {
    /// 1-based frame number j.
    pub frame_index: usize,
    /// Decoded latent.
    pub vector: Vec<T>,
    /// `‖z_t‖` before the first step and after each of the T steps.
    pub trace: Vec<f64>,
}

/// Runs the full chain over an already-encoded token matrix:
/// decorrelation (unless `enable_gs` is off), per-frame conditioning
/// (unless `enable_svr` is off), then T denoising steps per frame from a
/// seeded Gaussian latent shared across frames, and the identity decode.
/// Returns one output per frame, in frame order.
pub fn run_pipeline<T: Real>(
    matrix: &TokenEmbeddingMatrix<T>,
    layout: &PromptLayout,
    config: &PipelineConfig<T>,
) -> Result<Vec<FrameOutput<T>>> {
    config.validate()?;
    layout.validate_rows(matrix.n_tokens())?;
    let n = layout.n_frames();

    // Stage 2: decorrelation.
    let (c_tilde, mut reps) = if config.enable_gs {
        let frames = extract_frame_matrix(matrix, layout)?;
        let decorrelated = modified_gram_schmidt(&frames, &config.decorrelation)?;
        let injected = inject_decorrelated(matrix, layout, &decorrelated)?;
        (injected, Some(decorrelated))
    } else {
        (matrix.clone(), None)
    };
    if config.enable_svr && reps.is_none() {
        // Reweighting without decorrelation conditions on the raw
        // representatives.
        let frames = extract_frame_matrix(&c_tilde, layout)?;
        reps = Some(DecorrelatedFrameMatrix::from_rows_unchecked(
            frames.rows().clone(),
        )?);
    }

    let mut stream = SplitMix64::new(config.seed);
    let weights = ToyDenoiserWeights::from_stream(
        &mut stream,
        config.latent_dim,
        config.n_queries,
        config.attn_dim,
        matrix.dim(),
    )?;
    let initial_latents: Vec<Vec<T>> = if config.per_frame_noise {
        (0..n)
            .map(|_| {
                stream
                    .gaussian_vec(config.latent_dim)
                    .into_iter()
                    .map(T::from_f64)
                    .collect()
            })
            .collect()
    } else {
        let shared: Vec<T> = stream
            .gaussian_vec(config.latent_dim)
            .into_iter()
            .map(T::from_f64)
            .collect();
        vec![shared; n]
    };

    let run_frame = |j: usize| -> Result<FrameOutput<T>> {
        // Stage 3: per-frame conditioning.
        let conditioned = match &reps {
            Some(reps) if config.enable_svr => {
                assemble_conditioned(&c_tilde, layout, reps, j, &config.svr)?
            }
            _ => ConditionedMatrix::new(c_tilde.clone(), j),
        };
        // Stage 4: denoising loop.
        let mut state = LatentState::new(initial_latents[j - 1].clone(), config.steps)?;
        let mut trace = Vec::with_capacity(config.steps + 1);
        trace.push(state.norm());
        for _ in 0..config.steps {
            state = toy_denoise_step(
                &state,
                &conditioned,
                &weights,
                layout,
                config.step_size,
                config.enable_ipca,
            )?;
            trace.push(state.norm());
        }
        Ok(FrameOutput {
            frame_index: j,
            vector: toy_decode(&state)?,
            trace,
        })
    };

    if config.parallel_frames {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (1..=n)
                .map(|j| scope.spawn(move || run_frame(j)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("frame worker panicked"))
                .collect()
        })
    } else {
        (1..=n).map(run_frame).collect()
    }
}
