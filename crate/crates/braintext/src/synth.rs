//! Synthetic-subject generator: paired (transcript, pseudo-BOLD) stories
//! with a known text-to-signal mapping, sized for desk-scale experiments.
//!
//! Word sequences come from a seeded bigram chain so a language prior is
//! genuinely informative. Every vocabulary word carries a fixed voxel
//! signature; a TR's neural drive is the sum of the signatures of the
//! words spoken in it, convolved along the TR axis with a double-gamma
//! hemodynamic kernel, plus optional Gaussian noise. The same seed always
//! yields bit-identical data.
//!
//! Signatures are `common_gain * base + delta_w`: the shared `base`
//! component makes the per-TR word count linearly readable (the word-rate
//! regression needs it), while `delta_w` carries word identity. Because
//! the kernel is zero at lag 0, frames must be read a couple of TRs after
//! the words they encode — pair this generator with a window frame offset
//! of about `peak / tr` (see the corpus windowing).

use crate::corpus::{FmriRun, StimulusTranscript, WordEvent};
use crate::tensor::Mat;
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub n_stories: usize,
    pub story_seconds: f64,
    pub tr_seconds: f64,
    pub n_voxels: usize,
    pub words_per_second_mean: f64,
    pub words_per_second_var: f64,
    /// Support of the hemodynamic kernel, in seconds.
    pub hrf_length_s: f64,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            vocab_size: 120,
            n_stories: 4,
            story_seconds: 300.0,
            tr_seconds: 2.0,
            n_voxels: 64,
            words_per_second_mean: 1.0,
            words_per_second_var: 0.0625,
            hrf_length_s: 25.0,
            noise_sigma: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size as f64),
            ("n_stories", self.n_stories as f64),
            ("story_seconds", self.story_seconds),
            ("tr_seconds", self.tr_seconds),
            ("n_voxels", self.n_voxels as f64),
            ("words_per_second_mean", self.words_per_second_mean),
            ("hrf_length_s", self.hrf_length_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.words_per_second_var < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("variances must be nonnegative".into()));
        }
        if self.story_seconds < self.tr_seconds {
            return Err(Error::Config(
                "story_seconds must cover at least one TR".into(),
            ));
        }
        Ok(())
    }
}

const FACTORIALS: [f64; 21] = {
    let mut f = [1.0f64; 21];
    let mut i = 1;
    while i < 21 {
        f[i] = f[i - 1] * i as f64;
        i += 1;
    }
    f
};

/// Double-gamma response at time `t` seconds: a gamma bump peaking near
/// 5 s minus a 1/6-weighted undershoot peaking near 15 s. Not normalized.
fn double_gamma(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    // shape a1=6, a2=16, scale 1, undershoot ratio 1/6
    let bump = t.powi(5) * (-t).exp() / FACTORIALS[5];
    let undershoot = t.powi(15) * (-t).exp() / FACTORIALS[15];
    bump - undershoot / 6.0
}

/// Hemodynamic kernel sampled every `tr_seconds` over `length_s`, scaled
/// to unit peak. Entry 0 is the response at lag zero (which is 0: BOLD
/// lags its cause).
pub fn hrf_kernel(tr_seconds: f64, length_s: f64) -> Vec<f64> {
    assert!(tr_seconds > 0.0 && length_s > 0.0);
    let n = (length_s / tr_seconds).floor() as usize + 1;
    let raw: Vec<f64> = (0..n).map(|i| double_gamma(i as f64 * tr_seconds)).collect();
    let peak = raw.iter().cloned().fold(0.0f64, f64::max);
    assert!(peak > 0.0, "kernel support too short to reach the bump");
    raw.iter().map(|v| v / peak).collect()
}

/// Causal FIR convolution down the rows: `out[t] = sum_tau kernel[tau] *
/// impulses[t - tau]`.
pub fn convolve_rows(impulses: &Mat, kernel: &[f64]) -> Mat {
    let mut out = Mat::zeros(impulses.rows, impulses.cols);
    for t in 0..impulses.rows {
        for (tau, &k) in kernel.iter().enumerate() {
            if tau > t {
                break;
            }
            if k == 0.0 {
                continue;
            }
            let src = impulses.row(t - tau);
            let dst = out.row_mut(t);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
    out
}

/// Pronounceable, unique word for a vocabulary index.
pub fn synth_word(i: usize) -> String {
    const CONS: &[u8] = b"bdfghjklmnprstvwz";
    const VOWS: &[u8] = b"aeiou";
    let n_syl = CONS.len() * VOWS.len();
    let syl = |k: usize| {
        let c = CONS[k / VOWS.len()] as char;
        let v = VOWS[k % VOWS.len()] as char;
        format!("{c}{v}")
    };
    if i < n_syl {
        syl(i)
    } else {
        format!("{}{}", syl(i / n_syl - 1), syl(i % n_syl))
    }
}

/// Seeded bigram chain: each word prefers three successors (85% of the
/// mass among them) with the rest spread uniformly.
struct BigramChain {
    successors: Vec<[usize; 3]>,
    vocab_size: usize,
}

const SUCCESSOR_WEIGHTS: [f64; 3] = [0.50, 0.25, 0.10];

impl BigramChain {
    fn new(vocab_size: usize, rng: &mut ChaCha8Rng) -> BigramChain {
        let successors = (0..vocab_size)
            .map(|_| {
                let mut s = [0usize; 3];
                for slot in &mut s {
                    *slot = rng.random_range(0..vocab_size);
                }
                s
            })
            .collect();
        BigramChain {
            successors,
            vocab_size,
        }
    }

    fn next(&self, current: usize, rng: &mut ChaCha8Rng) -> usize {
        let mut u: f64 = rng.random();
        for (slot, &w) in self.successors[current].iter().zip(&SUCCESSOR_WEIGHTS) {
            if u < w {
                return *slot;
            }
            u -= w;
        }
        rng.random_range(0..self.vocab_size)
    }
}

/// Generate `n_stories` paired transcripts and BOLD runs for one
/// synthetic subject (`synth01`).
pub fn make_synthetic_dataset(cfg: &SynthConfig) -> Result<(Vec<StimulusTranscript>, Vec<FmriRun>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v = cfg.vocab_size;

    // fixed per-dataset structure
    let base = crate::util::randn(&mut rng, 1, cfg.n_voxels, 1.0);
    let deltas = crate::util::randn(&mut rng, v, cfg.n_voxels, 1.0);
    let common_gain = 0.8;
    let signature = |w: usize| -> Vec<f64> {
        (0..cfg.n_voxels)
            .map(|j| common_gain * base.at(0, j) + deltas.at(w, j))
            .collect()
    };
    let chain = BigramChain::new(v, &mut rng);
    let rate_sd = cfg.words_per_second_var.sqrt();
    let rate_dist = rand_distr::Normal::new(cfg.words_per_second_mean, rate_sd)
        .map_err(|e| Error::Config(format!("bad word-rate distribution: {e}")))?;
    let kernel = hrf_kernel(cfg.tr_seconds, cfg.hrf_length_s);
    let n_tr = (cfg.story_seconds / cfg.tr_seconds).floor() as usize;

    let mut transcripts = Vec::with_capacity(cfg.n_stories);
    let mut runs = Vec::with_capacity(cfg.n_stories);
    for s in 0..cfg.n_stories {
        let story_id = format!("story{s:02}");
        let mut events = Vec::new();
        let mut indices = Vec::new();
        let mut word = rng.random_range(0..v);
        let mut t = 0.2; // small lead-in before the first word
        while t < cfg.story_seconds {
            let rate = rate_dist.sample(&mut rng).clamp(0.2, 4.0);
            let gap = 1.0 / rate;
            events.push(WordEvent {
                word: synth_word(word),
                onset: t,
                offset: t + (0.8 * gap).min(0.6),
            });
            indices.push(word);
            word = chain.next(word, &mut rng);
            t += gap;
        }

        // per-TR neural drive: sum of signatures of words in that TR
        let mut impulses = Mat::zeros(n_tr, cfg.n_voxels);
        for (e, &w_idx) in events.iter().zip(&indices) {
            let bin = (e.onset / cfg.tr_seconds).floor() as usize;
            if bin >= n_tr {
                continue;
            }
            let sig = signature(w_idx);
            let row = impulses.row_mut(bin);
            for (r, s) in row.iter_mut().zip(&sig) {
                *r += s;
            }
        }
        let mut frames = convolve_rows(&impulses, &kernel);
        let noise = crate::util::randn(&mut rng, n_tr, cfg.n_voxels, 1.0);
        if cfg.noise_sigma > 0.0 {
            for (f, n) in frames.data.iter_mut().zip(&noise.data) {
                *f += cfg.noise_sigma * n;
            }
        }

        transcripts.push(StimulusTranscript::new(story_id.clone(), events)?);
        runs.push(FmriRun::new(
            story_id,
            "synth01",
            cfg.tr_seconds,
            frames,
            None,
        )?);
    }
    Ok((transcripts, runs))
}
