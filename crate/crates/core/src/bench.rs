//! Timing harness comparing full softmax, the fused sampled kernel and an
//! unfused sampled baseline, plus JSONL and SVG reporting.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::hint::black_box;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::BatchIndices;
use crate::dense::{Dtype, Matrix, Real};
use crate::error::{contract, Error, Result};
use crate::full_softmax::{full_forward, full_loss_and_grads};
use crate::params::{default_scale, init_table, TableRole};
use crate::sampled_loss::{backward_unfused, forward, loss_and_grads};
use crate::sampler::{draw_candidates, CandidateDist, CandidateSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Full,
    Sampled,
    /// Sampled loss whose backward recomputes gathers, logits and `P` from
    /// scratch instead of reusing the forward cache.
    SampledNaiveBwd,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Full, Kernel::Sampled, Kernel::SampledNaiveBwd];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Full => "full",
            Kernel::Sampled => "sampled",
            Kernel::SampledNaiveBwd => "sampled_naive_bwd",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                format!("unknown kernel `{s}` (expected full, sampled or sampled_naive_bwd)")
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Forward,
    ForwardBackward,
}

impl Pass {
    pub const ALL: [Pass; 2] = [Pass::Forward, Pass::ForwardBackward];

    pub fn name(self) -> &'static str {
        match self {
            Pass::Forward => "forward",
            Pass::ForwardBackward => "forward_backward",
        }
    }
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub n_classes: usize,
    pub n_sampled: usize,
    pub n_embed: usize,
    pub n_batch: usize,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
    pub dtype: Dtype,
    pub kernels: Vec<Kernel>,
}

impl Default for BenchConfig {
    /// 100,000 classes, 100 samples, 300-dim embeddings, batch of 256.
    fn default() -> Self {
        Self {
            n_classes: 100_000,
            n_sampled: 100,
            n_embed: 300,
            n_batch: 256,
            iters: 20,
            warmup: 2,
            seed: 0,
            dtype: Dtype::F32,
            kernels: Kernel::ALL.to_vec(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_classes", self.n_classes),
            ("n_sampled", self.n_sampled),
            ("n_embed", self.n_embed),
            ("n_batch", self.n_batch),
            ("iters", self.iters),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(contract(format!("{name} must be at least 1")));
        }
        if self.kernels.is_empty() {
            return Err(contract("no kernels selected"));
        }
        Ok(())
    }
}

/// Timing summary for one kernel and pass. Durations are nanoseconds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub kernel: Kernel,
    pub pass: Pass,
    pub n_classes: usize,
    pub n_sampled: usize,
    pub n_embed: usize,
    pub n_batch: usize,
    pub dtype: Dtype,
    pub iters: usize,
    pub mean_ns: u64,
    pub p50_ns: u64,
    pub p95_ns: u64,
    pub min_ns: u64,
}

/// Loss value produced by one benchmark call (warmup or timed).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSample {
    pub kernel: Kernel,
    pub pass: Pass,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOutcome {
    pub records: Vec<BenchRecord>,
    pub losses: Vec<LossSample>,
}

impl BenchOutcome {
    pub fn record(&self, kernel: Kernel, pass: Pass) -> Option<&BenchRecord> {
        self.records
            .iter()
            .find(|r| r.kernel == kernel && r.pass == pass)
    }

    /// `mean_ns(slow) / mean_ns(fast)` for the same pass.
    pub fn speedup(&self, slow: Kernel, fast: Kernel, pass: Pass) -> Option<f64> {
        let slow = self.record(slow, pass)?;
        let fast = self.record(fast, pass)?;
        Some(slow.mean_ns as f64 / fast.mean_ns as f64)
    }
}

struct Workload<T> {
    input: Matrix<T>,
    target: Matrix<T>,
    batch: BatchIndices,
    cand: CandidateSet<T>,
}

impl<T: Real> Workload<T> {
    fn generate(cfg: &BenchConfig) -> Result<Self> {
        let scale = default_scale(cfg.n_embed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let input = init_table::<T>(
            TableRole::Input,
            cfg.n_classes,
            cfg.n_embed,
            rng.random(),
            scale,
        )?;
        let target = init_table::<T>(
            TableRole::Target,
            cfg.n_classes,
            cfg.n_embed,
            rng.random(),
            scale,
        )?;
        let inputs = (0..cfg.n_batch)
            .map(|_| rng.random_range(0..cfg.n_classes))
            .collect();
        let labels: Vec<usize> = (0..cfg.n_batch)
            .map(|_| rng.random_range(0..cfg.n_classes))
            .collect();
        let dist = CandidateDist::log_uniform(cfg.n_classes)?;
        let cand = draw_candidates(&dist, cfg.n_sampled, &labels, rng.random())?;
        Ok(Self {
            input: input.into_matrix(),
            target: target.into_matrix(),
            batch: BatchIndices::new(inputs, labels)?,
            cand,
        })
    }

    fn run(&self, kernel: Kernel, pass: Pass) -> Result<f64> {
        let (u, v, batch, cand) = (&self.input, &self.target, &self.batch, &self.cand);
        match (kernel, pass) {
            (Kernel::Full, Pass::Forward) => full_forward(u, v, batch).map(|(l, c)| {
                black_box(c);
                l
            }),
            (Kernel::Full, Pass::ForwardBackward) => {
                full_loss_and_grads(u, v, batch).map(|(l, g)| {
                    black_box(g);
                    l
                })
            }
            (Kernel::Sampled | Kernel::SampledNaiveBwd, Pass::Forward) => {
                forward(u, v, batch, cand).map(|(l, c)| {
                    black_box(c);
                    l
                })
            }
            (Kernel::Sampled, Pass::ForwardBackward) => {
                loss_and_grads(u, v, batch, cand).map(|(l, g)| {
                    black_box(g);
                    l
                })
            }
            (Kernel::SampledNaiveBwd, Pass::ForwardBackward) => {
                let (loss, cache) = forward(u, v, batch, cand)?;
                drop(black_box(cache));
                black_box(backward_unfused(u, v, batch, cand)?);
                Ok(loss)
            }
        }
    }
}

/// Runs every selected kernel for both passes: `warmup` untimed calls, then
/// `iters` timed calls. Data generation happens before any timing.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchOutcome> {
    cfg.validate()?;
    match cfg.dtype {
        Dtype::F32 => run_typed::<f32>(cfg),
        Dtype::F64 => run_typed::<f64>(cfg),
    }
}

fn run_typed<T: Real>(cfg: &BenchConfig) -> Result<BenchOutcome> {
    let work = Workload::<T>::generate(cfg)?;
    let mut kernels = cfg.kernels.clone();
    kernels.dedup();

    let mut records = Vec::new();
    let mut losses = Vec::new();
    for &kernel in &kernels {
        for pass in Pass::ALL {
            for _ in 0..cfg.warmup {
                let loss = work.run(kernel, pass)?;
                losses.push(LossSample { kernel, pass, loss });
            }
            let mut samples = Vec::with_capacity(cfg.iters);
            for _ in 0..cfg.iters {
                let start = Instant::now();
                let loss = work.run(kernel, pass)?;
                let elapsed = start.elapsed();
                samples.push(u64::try_from(elapsed.as_nanos()).unwrap_or(u64::MAX).max(1));
                losses.push(LossSample { kernel, pass, loss });
            }
            records.push(summarize(kernel, pass, cfg, samples));
        }
    }
    Ok(BenchOutcome { records, losses })
}

/// Nearest-rank percentile of an ascending, non-empty slice.
fn percentile(sorted: &[u64], p: f64) -> u64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn summarize(kernel: Kernel, pass: Pass, cfg: &BenchConfig, mut samples: Vec<u64>) -> BenchRecord {
    samples.sort_unstable();
    let total: u128 = samples.iter().map(|&s| s as u128).sum();
    BenchRecord {
        kernel,
        pass,
        n_classes: cfg.n_classes,
        n_sampled: cfg.n_sampled,
        n_embed: cfg.n_embed,
        n_batch: cfg.n_batch,
        dtype: cfg.dtype,
        iters: samples.len(),
        mean_ns: (total / samples.len() as u128) as u64,
        p50_ns: percentile(&samples, 0.50),
        p95_ns: percentile(&samples, 0.95),
        min_ns: samples[0],
    }
}

/// One JSON object per record, LF-terminated.
pub fn emit_jsonl(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
    for record in records {
        let line = serde_json::to_string(record).expect("records always serialize");
        out.write_all(line.as_bytes()).map_err(io)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

fn format_ns(ns: u64) -> String {
    let ns = ns as f64;
    if ns >= 1e9 {
        format!("{:.2} s", ns / 1e9)
    } else if ns >= 1e6 {
        format!("{:.2} ms", ns / 1e6)
    } else if ns >= 1e3 {
        format!("{:.2} us", ns / 1e3)
    } else {
        format!("{ns:.0} ns")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

const BAR_WIDTH: f64 = 64.0;
const BAR_GAP: f64 = 36.0;
const PLOT_LEFT: f64 = 80.0;
const PLOT_TOP: f64 = 50.0;
const PLOT_HEIGHT: f64 = 300.0;

/// Log-scale bar chart of `mean_ns`, one bar per record, ordered by
/// `(pass, kernel)` name.
pub fn render_svg(records: &[BenchRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(contract("cannot plot an empty record list"));
    }
    let mut bars: Vec<&BenchRecord> = records.iter().collect();
    bars.sort_by(|a, b| (a.pass.name(), a.kernel.name()).cmp(&(b.pass.name(), b.kernel.name())));

    let lo_ns = bars.iter().map(|r| r.mean_ns).min().unwrap().max(1) as f64;
    let hi_ns = bars.iter().map(|r| r.mean_ns).max().unwrap().max(1) as f64;
    let lo = lo_ns.log10().floor();
    let hi = hi_ns.log10().ceil().max(lo + 1.0);
    let y_of = |ns: f64| PLOT_TOP + PLOT_HEIGHT * (1.0 - (ns.max(1.0).log10() - lo) / (hi - lo));

    let width = PLOT_LEFT + bars.len() as f64 * (BAR_WIDTH + BAR_GAP) + BAR_GAP;
    let height = PLOT_TOP + PLOT_HEIGHT + 60.0;
    let base = PLOT_TOP + PLOT_HEIGHT;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{width:.0}" height="{height:.0}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">mean time per call (log scale)</text>"#,
        width / 2.0
    );

    for decade in lo as i32..=hi as i32 {
        let y = y_of(10f64.powi(decade));
        let _ = writeln!(
            svg,
            r##"<line x1="{PLOT_LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
            width - BAR_GAP / 2.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            PLOT_LEFT - 6.0,
            y + 4.0,
            escape(&format_ns(10u64.saturating_pow(decade.max(0) as u32)))
        );
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{PLOT_LEFT:.1}" y1="{base:.1}" x2="{:.1}" y2="{base:.1}" stroke="black"/>"#,
        width - BAR_GAP / 2.0
    );

    for (k, r) in bars.iter().enumerate() {
        let x = PLOT_LEFT + BAR_GAP + k as f64 * (BAR_WIDTH + BAR_GAP);
        let top = y_of(r.mean_ns as f64).min(base - 2.0);
        let fill = match r.kernel {
            Kernel::Full => "#c0504d",
            Kernel::Sampled => "#4f81bd",
            Kernel::SampledNaiveBwd => "#9bbb59",
        };
        let cx = x + BAR_WIDTH / 2.0;
        let _ = writeln!(
            svg,
            r#"<rect class="bar" x="{x:.1}" y="{top:.1}" width="{BAR_WIDTH:.1}" height="{:.1}" fill="{fill}"><title>{} {}: {}</title></rect>"#,
            base - top,
            escape(r.kernel.name()),
            escape(r.pass.name()),
            r.mean_ns
        );
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            top - 4.0,
            escape(&format_ns(r.mean_ns))
        );
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            base + 16.0,
            escape(r.kernel.name())
        );
        let _ = writeln!(
            svg,
            r##"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" fill="#555555">{}</text>"##,
            base + 30.0,
            escape(r.pass.name())
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_plot_svg(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let svg = render_svg(records)?;
    fs::write(path, svg).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
