//! `decorstory` — command-line front end exposing each conditioning stage
//! (synthetic data, decorrelation, reweighting, attention, the full
//! pipeline, and correlation metrics) over DEMB embedding files.
//!
//! Exit codes: 0 on success, 1 on a domain error (message on stderr), 2 on
//! a usage error. The `DECORSTORY_FLOAT` environment variable selects the
//! arithmetic precision (`f32` or `f64`, default `f64`); inputs are
//! converted to the selected precision on load and outputs are written in
//! it.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use decorstory::analysis::{correlation_report, gen_synthetic, CorrelationReport};
use decorstory::decorrelation::{
    inject_decorrelated, modified_gram_schmidt, DecorrelatedFrameMatrix, DecorrelationParams,
    DegeneratePolicy,
};
use decorstory::demb::{load_embeddings, write_embeddings, write_matrix_file, LoadedEmbeddings};
use decorstory::error::{Error, Result};
use decorstory::ipca::{identity_mask, ipca_attention, project_kv, AttentionBatch, AttentionWeights};
use decorstory::layout::{extract_frame_matrix, PromptLayout, Span, TokenEmbeddingMatrix};
use decorstory::matrix::Matrix;
use decorstory::pipeline::{run_pipeline, PipelineConfig};
use decorstory::real::{Dtype, Real};
use decorstory::rng::SplitMix64;
use decorstory::svr::{assemble_conditioned, ConditionedMatrix, SvrParams};

#[derive(Parser)]
#[command(
    name = "decorstory",
    version,
    about = "Prompt-embedding decorrelation and conditioning toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    /// Fail on linearly dependent frames.
    Error,
    /// Keep the normalized original row and record the frame.
    KeepNormalizedOriginal,
}

impl From<PolicyArg> for DegeneratePolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Error => DegeneratePolicy::Error,
            PolicyArg::KeepNormalizedOriginal => DegeneratePolicy::KeepNormalizedOriginal,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic correlated frame embeddings and write them as a
    /// prompt matrix (SOT = e1, identity = normalized ones, EOT = e_D,
    /// one single-token span per frame).
    GenSynthetic {
        /// Number of frames.
        #[arg(long)]
        n: usize,
        /// Embedding dimension.
        #[arg(long)]
        d: usize,
        /// Shared-component weight in [0, 1].
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Orthonormalize the frame representatives and re-inject them.
    Decorrelate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Relative residual-norm threshold for linear dependence.
        #[arg(long, default_value_t = 1e-8)]
        eps: f64,
        #[arg(long, value_enum, default_value_t = PolicyArg::Error)]
        degenerate_policy: PolicyArg,
    },
    /// Build the conditioned matrix for one target frame (express that
    /// frame, suppress the others, update EOT).
    Svr {
        #[arg(long = "in")]
        input: PathBuf,
        /// Target frame j, 1-based.
        #[arg(long)]
        frame: usize,
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 0.001)]
        alpha_prime: f64,
        #[arg(long, default_value_t = 1.0)]
        beta_prime: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run identity-preserving cross-attention over a conditioned matrix
    /// with seeded weights (stream order: W_K, W_V, then the queries, all
    /// uniform in [-1, 1)) and write the Lq x d output matrix.
    Ipca {
        #[arg(long = "in")]
        input: PathBuf,
        /// Number of query rows Lq.
        #[arg(long)]
        queries: usize,
        /// Key/query dimension d.
        #[arg(long = "d")]
        attn_dim: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full conditioning + toy-denoising pipeline; writes one
    /// `frame_<j>.demb` latent per frame plus a trace.csv of latent norms.
    Pipeline {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
        #[arg(long, default_value_t = 4)]
        latent_dim: usize,
        #[arg(long, default_value_t = 4)]
        queries: usize,
        #[arg(long, default_value_t = 8)]
        attn_dim: usize,
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 0.001)]
        alpha_prime: f64,
        #[arg(long, default_value_t = 1.0)]
        beta_prime: f64,
        #[arg(long, default_value_t = 1e-8)]
        eps: f64,
        #[arg(long, value_enum, default_value_t = PolicyArg::Error)]
        degenerate_policy: PolicyArg,
        /// Skip Gram-Schmidt decorrelation.
        #[arg(long)]
        no_gs: bool,
        /// Skip singular-value reweighting.
        #[arg(long)]
        no_svr: bool,
        /// Use plain attention instead of the identity-augmented form.
        #[arg(long)]
        no_ipca: bool,
        /// One thread per frame; outputs stay bitwise identical.
        #[arg(long)]
        parallel_frames: bool,
        /// Draw a fresh initial latent per frame instead of sharing one.
        #[arg(long)]
        per_frame_noise: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Correlation reports for two embedding files (typically before and
    /// after decorrelation), written as RFC 4180 CSV.
    Metrics {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
}

fn main() {
    std::process::exit(run_cli(std::env::args_os()));
}

/// Parses argv, selects precision from `DECORSTORY_FLOAT`, and runs the
/// subcommand. Never panics on malformed input.
fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    let precision = match std::env::var("DECORSTORY_FLOAT") {
        Err(_) => Dtype::F64,
        Ok(v) if v == "f64" => Dtype::F64,
        Ok(v) if v == "f32" => Dtype::F32,
        Ok(v) => {
            eprintln!("DECORSTORY_FLOAT must be f32 or f64, got {:?}", v);
            return 2;
        }
    };
    let outcome = match precision {
        Dtype::F64 => dispatch::<f64>(cli.command),
        Dtype::F32 => dispatch::<f32>(cli.command),
    };
    match outcome {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {}", err);
            1
        }
    }
}

fn dispatch<T: Real>(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic { n, d, rho, seed, out } => cmd_gen_synthetic::<T>(n, d, rho, seed, &out),
        Command::Decorrelate {
            input,
            out,
            eps,
            degenerate_policy,
        } => cmd_decorrelate::<T>(&input, &out, eps, degenerate_policy.into()),
        Command::Svr {
            input,
            frame,
            alpha,
            beta,
            alpha_prime,
            beta_prime,
            out,
        } => cmd_svr::<T>(
            &input,
            frame,
            SvrParams {
                alpha: T::from_f64(alpha),
                beta: T::from_f64(beta),
                alpha_prime: T::from_f64(alpha_prime),
                beta_prime: T::from_f64(beta_prime),
            },
            &out,
        ),
        Command::Ipca {
            input,
            queries,
            attn_dim,
            seed,
            out,
        } => cmd_ipca::<T>(&input, queries, attn_dim, seed, &out),
        Command::Pipeline {
            input,
            steps,
            seed,
            eta,
            latent_dim,
            queries,
            attn_dim,
            alpha,
            beta,
            alpha_prime,
            beta_prime,
            eps,
            degenerate_policy,
            no_gs,
            no_svr,
            no_ipca,
            parallel_frames,
            per_frame_noise,
            out_dir,
        } => {
            let config = PipelineConfig {
                svr: SvrParams {
                    alpha: T::from_f64(alpha),
                    beta: T::from_f64(beta),
                    alpha_prime: T::from_f64(alpha_prime),
                    beta_prime: T::from_f64(beta_prime),
                },
                decorrelation: DecorrelationParams {
                    dependence_epsilon: T::from_f64(eps),
                    degenerate_policy: degenerate_policy.into(),
                },
                steps,
                seed,
                latent_dim,
                step_size: T::from_f64(eta),
                n_queries: queries,
                attn_dim,
                enable_gs: !no_gs,
                enable_svr: !no_svr,
                enable_ipca: !no_ipca,
                parallel_frames,
                per_frame_noise,
            };
            cmd_pipeline::<T>(&input, &config, &out_dir)
        }
        Command::Metrics { before, after, csv } => cmd_metrics::<T>(&before, &after, &csv),
    }
}

/// Loads an embedding file and converts it to the selected precision
/// (exact when widening, rounded when narrowing).
fn load_as<T: Real>(path: &Path) -> Result<(TokenEmbeddingMatrix<T>, PromptLayout)> {
    let (loaded, layout) = load_embeddings(path)?;
    let m64 = match loaded {
        LoadedEmbeddings::F32(m) => m.into_matrix().to_f64(),
        LoadedEmbeddings::F64(m) => m.into_matrix(),
    };
    let data = m64.as_slice().iter().map(|&v| T::from_f64(v)).collect();
    Ok((
        TokenEmbeddingMatrix::from_raw(m64.nrows(), m64.ncols(), data)?,
        layout,
    ))
}

fn cmd_gen_synthetic<T: Real>(n: usize, d: usize, rho: f64, seed: u64, out: &Path) -> Result<()> {
    let frames = gen_synthetic::<T>(n, d, rho, seed)?;
    let mut rows = Matrix::<T>::zeros(n + 3, d);
    rows.set(0, 0, T::ONE); // SOT = e1
    let ones = T::from_f64(1.0 / (d as f64).sqrt());
    for j in 0..d {
        rows.set(1, j, ones); // identity = normalized all-ones
    }
    for k in 0..n {
        rows.row_mut(2 + k).copy_from_slice(frames.rows().row(k));
    }
    rows.set(n + 2, d - 1, T::ONE); // EOT = e_D
    let matrix = TokenEmbeddingMatrix::new(rows)?;
    let spans = (0..n).map(|k| Span::new(2 + k, 2 + k)).collect();
    let layout = PromptLayout::new(0, Span::new(1, 1), spans, n + 2)?;
    write_embeddings(&matrix, &layout, out)
}

fn cmd_decorrelate<T: Real>(
    input: &Path,
    out: &Path,
    eps: f64,
    policy: DegeneratePolicy,
) -> Result<()> {
    let (matrix, layout) = load_as::<T>(input)?;
    let frames = extract_frame_matrix(&matrix, &layout)?;
    let params = DecorrelationParams {
        dependence_epsilon: T::from_f64(eps),
        degenerate_policy: policy,
    };
    let decorrelated = modified_gram_schmidt(&frames, &params)?;
    let injected = inject_decorrelated(&matrix, &layout, &decorrelated)?;
    write_embeddings(&injected, &layout, out)
}

fn cmd_svr<T: Real>(
    input: &Path,
    frame: usize,
    params: SvrParams<T>,
    out: &Path,
) -> Result<()> {
    let (matrix, layout) = load_as::<T>(input)?;
    let frames = extract_frame_matrix(&matrix, &layout)?;
    let reps = DecorrelatedFrameMatrix::from_rows_unchecked(frames.rows().clone())?;
    let conditioned = assemble_conditioned(&matrix, &layout, &reps, frame, &params)?;
    write_embeddings(conditioned.data(), &layout, out)
}

fn cmd_ipca<T: Real>(
    input: &Path,
    queries: usize,
    attn_dim: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if queries == 0 || attn_dim == 0 {
        return Err(Error::InvalidArgument(
            "query count and attention dim must be >= 1".into(),
        ));
    }
    let (matrix, layout) = load_as::<T>(input)?;
    let d = matrix.dim();
    let mut stream = SplitMix64::new(seed);
    let mut uniform = |rows: usize, cols: usize| -> Result<Matrix<T>> {
        let data = stream
            .pm1_vec(rows * cols)
            .into_iter()
            .map(T::from_f64)
            .collect();
        Matrix::new(rows, cols, data)
    };
    let w_k = uniform(d, attn_dim)?;
    let w_v = uniform(d, attn_dim)?;
    let q = uniform(queries, attn_dim)?;
    let weights = AttentionWeights::new(w_k, w_v)?;
    let conditioned = ConditionedMatrix::new(matrix, 1);
    let (k, v) = project_kv(&conditioned, &weights)?;
    let (k_id, v_id) = identity_mask(&k, &v, &layout)?;
    let batch = AttentionBatch::new(q, k, v, k_id, v_id)?;
    let out_matrix = ipca_attention(&batch)?;
    write_matrix_file(&out_matrix, out)
}

fn cmd_pipeline<T: Real>(input: &Path, config: &PipelineConfig<T>, out_dir: &Path) -> Result<()> {
    let (matrix, layout) = load_as::<T>(input)?;
    let outputs = run_pipeline(&matrix, &layout, config)?;
    fs::create_dir_all(out_dir)?;
    let mut trace_csv = String::from("frame,step,norm\r\n");
    for frame in &outputs {
        let latent = Matrix::new(1, frame.vector.len(), frame.vector.clone())?;
        write_matrix_file(&latent, &out_dir.join(format!("frame_{}.demb", frame.frame_index)))?;
        for (step, norm) in frame.trace.iter().enumerate() {
            trace_csv.push_str(&format!(
                "{},{},{}\r\n",
                frame.frame_index,
                step,
                format_float(*norm)
            ));
        }
    }
    fs::write(out_dir.join("trace.csv"), trace_csv)?;
    Ok(())
}

fn cmd_metrics<T: Real>(before: &Path, after: &Path, csv: &Path) -> Result<()> {
    let (before_matrix, before_layout) = load_as::<T>(before)?;
    let (after_matrix, after_layout) = load_as::<T>(after)?;
    let before_frames = extract_frame_matrix(&before_matrix, &before_layout)?;
    let after_frames = extract_frame_matrix(&after_matrix, &after_layout)?;
    let after_reps = DecorrelatedFrameMatrix::from_rows_unchecked(after_frames.rows().clone())?;
    let (before_report, after_report) = correlation_report(&before_frames, &after_reps)?;
    let mut out = String::from("record,value\r\n");
    append_report(&mut out, "before", &before_report);
    append_report(&mut out, "after", &after_report);
    fs::write(csv, out)?;
    Ok(())
}

fn append_report(out: &mut String, label: &str, report: &CorrelationReport) {
    let n = report.gram.nrows();
    out.push_str(&format!("{}.n_frames,{}\r\n", label, n));
    out.push_str(&format!(
        "{}.mean_abs_offdiag,{}\r\n",
        label,
        format_float(report.mean_abs_offdiag)
    ));
    out.push_str(&format!(
        "{}.max_abs_offdiag,{}\r\n",
        label,
        format_float(report.max_abs_offdiag)
    ));
    out.push_str(&format!(
        "{}.effective_rank,{}\r\n",
        label,
        format_float(report.effective_rank)
    ));
    for i in 0..n {
        for j in 0..n {
            out.push_str(&format!(
                "{}.gram.{}.{},{}\r\n",
                label,
                i,
                j,
                format_float(report.gram.get(i, j))
            ));
        }
    }
}

/// 17 significant digits: parses back to the identical f64, dot decimal
/// separator regardless of locale.
fn format_float(v: f64) -> String {
    format!("{:.16e}", v)
}
