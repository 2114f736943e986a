//! Perturbation explanations for a single text-topic score.
//!
//! Words are deleted at random, the perturbed texts are rescored, and a
//! kernel-weighted ridge regression from keep-masks to scores gives one
//! weight per word position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub num_samples: usize,
    pub kernel_width: f64,
    pub ridge: f64,
    pub keep_probability: f64,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            num_samples: 500,
            kernel_width: 0.25,
            ridge: 1e-3,
            keep_probability: 0.5,
            seed: 0,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 2 {
            return Err(Error::Config("num_samples must be at least 2".into()));
        }
        if !(self.kernel_width > 0.0) || !(self.ridge >= 0.0) {
            return Err(Error::Config("kernel_width must be positive and ridge non-negative".into()));
        }
        if !(self.keep_probability > 0.0 && self.keep_probability < 1.0) {
            return Err(Error::Config("keep_probability must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordWeight {
    /// Position in the whitespace-split text.
    pub position: usize,
    pub word: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    /// Sorted by decreasing `|weight|`, ties by position.
    pub weights: Vec<WordWeight>,
    pub intercept: f64,
    /// Kernel-weighted R² of the surrogate, clamped to `[0, 1]`.
    pub r2: f64,
    pub num_samples: usize,
    pub kernel_width: f64,
    /// Score of the unperturbed text.
    pub score: f64,
}

impl Explanation {
    /// Weights in original word order.
    pub fn in_order(&self) -> Vec<&WordWeight> {
        let mut v: Vec<&WordWeight> = self.weights.iter().collect();
        v.sort_by_key(|w| w.position);
        v
    }

    pub fn weight_of(&self, word: &str) -> Option<f64> {
        self.weights.iter().find(|w| w.word == word).map(|w| w.weight)
    }

    /// Terminal highlight: green for positive influence, red for negative,
    /// brighter for larger weights.
    pub fn render_ansi(&self) -> String {
        let max = self.max_abs();
        self.in_order()
            .iter()
            .map(|w| {
                let level = if max > 0.0 { w.weight.abs() / max } else { 0.0 };
                if level < 0.05 {
                    w.word.clone()
                } else {
                    let shade = (255.0 - 175.0 * level).round() as u8;
                    let (r, g, b) = if w.weight > 0.0 { (shade, 255, shade) } else { (255, shade, shade) };
                    format!("\x1b[48;2;{r};{g};{b}m\x1b[30m{}\x1b[0m", w.word)
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn render_html(&self) -> String {
        let max = self.max_abs();
        let spans: Vec<String> = self
            .in_order()
            .iter()
            .map(|w| {
                let alpha = if max > 0.0 { w.weight.abs() / max } else { 0.0 };
                let rgb = if w.weight >= 0.0 { "0,160,0" } else { "200,0,0" };
                format!(
                    "<span title=\"{:.4}\" style=\"background-color: rgba({rgb},{alpha:.3})\">{}</span>",
                    w.weight,
                    html_escape(&w.word)
                )
            })
            .collect();
        format!("<p>{}</p>", spans.join(" "))
    }

    fn max_abs(&self) -> f64 {
        self.weights.iter().map(|w| w.weight.abs()).fold(0.0, f64::max)
    }
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Explains `scorer` around `text`. `scorer` maps a batch of texts to
/// scores and must be deterministic.
pub fn explain_with<F>(text: &str, scorer: F, cfg: &ExplainConfig) -> Result<Explanation>
where
    F: Fn(&[String]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::Empty("cannot explain an empty text".into()));
    }
    let d = words.len();
    let masks = if d == 1 {
        vec![vec![true], vec![false]]
    } else {
        sample_masks(d, cfg)
    };
    let texts: Vec<String> = masks
        .iter()
        .map(|m| {
            words
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(w, _)| *w)
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let y = scorer(&texts)?;
    if y.len() != texts.len() {
        return Err(Error::dim("explain", format!("scorer returned {} scores for {} texts", y.len(), texts.len())));
    }
    if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            context: "explain scorer".into(),
            detail: format!("score {bad}"),
        });
    }
    let (weights, intercept, r2) = if d == 1 {
        (vec![y[0] - y[1]], y[1], 1.0)
    } else {
        let kernel: Vec<f64> = masks
            .iter()
            .map(|m| {
                let dist = cosine_distance_to_ones(m);
                (-dist * dist / (cfg.kernel_width * cfg.kernel_width)).exp()
            })
            .collect();
        weighted_ridge(&masks, &y, &kernel, cfg.ridge)?
    };
    let mut out: Vec<WordWeight> = words
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(position, (w, weight))| WordWeight {
            position,
            word: w.to_string(),
            weight,
        })
        .collect();
    out.sort_by(|a, b| b.weight.abs().total_cmp(&a.weight.abs()).then(a.position.cmp(&b.position)));
    Ok(Explanation {
        weights: out,
        intercept,
        r2,
        num_samples: masks.len(),
        kernel_width: cfg.kernel_width,
        score: y[0],
    })
}

/// Explains the model's score of `text` against a rendered topic string.
pub fn explain(model: &Model, text: &str, topic: &str, cfg: &ExplainConfig) -> Result<Explanation> {
    explain_with(
        text,
        |texts| {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let topics = vec![topic; refs.len()];
            model.score_pairs(&refs, &topics)
        },
        cfg,
    )
}

/// First mask keeps every word; the rest keep each word independently.
fn sample_masks(d: usize, cfg: &ExplainConfig) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut masks = Vec::with_capacity(cfg.num_samples);
    masks.push(vec![true; d]);
    while masks.len() < cfg.num_samples {
        masks.push((0..d).map(|_| rng.random::<f64>() < cfg.keep_probability).collect());
    }
    masks
}

/// Cosine distance between a keep-mask and the all-ones mask.
pub fn cosine_distance_to_ones(mask: &[bool]) -> f64 {
    let kept = mask.iter().filter(|&&k| k).count() as f64;
    if kept == 0.0 {
        return 1.0;
    }
    1.0 - (kept / mask.len() as f64).sqrt()
}

/// Minimises `Σ πᵢ (yᵢ − b − w·zᵢ)² + λ‖w‖²` with an unpenalised
/// intercept. Returns `(w, b, R²)`.
pub fn weighted_ridge(z: &[Vec<bool>], y: &[f64], pi: &[f64], lambda: f64) -> Result<(Vec<f64>, f64, f64)> {
    let d = z.first().map_or(0, Vec::len);
    let total: f64 = pi.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric {
            context: "explain kernel".into(),
            detail: "all sample weights are zero".into(),
        });
    }
    let x = |i: usize, j: usize| if z[i][j] { 1.0 } else { 0.0 };
    let mean_z: Vec<f64> = (0..d)
        .map(|j| (0..z.len()).map(|i| pi[i] * x(i, j)).sum::<f64>() / total)
        .collect();
    let mean_y = y.iter().zip(pi).map(|(v, p)| v * p).sum::<f64>() / total;

    let mut a = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    let mut row = vec![0.0; d];
    for i in 0..z.len() {
        for j in 0..d {
            row[j] = x(i, j) - mean_z[j];
        }
        let yc = y[i] - mean_y;
        for j in 0..d {
            let pj = pi[i] * row[j];
            rhs[j] += pj * yc;
            for k in 0..=j {
                a[j * d + k] += pj * row[k];
            }
        }
    }
    for j in 0..d {
        for k in 0..j {
            a[k * d + j] = a[j * d + k];
        }
        // A tiny floor keeps columns that never vary solvable when λ = 0.
        a[j * d + j] += lambda.max(1e-12);
    }
    let w = cholesky_solve(&mut a, &rhs, d)?;
    let b = mean_y - w.iter().zip(&mean_z).map(|(w, m)| w * m).sum::<f64>();

    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for i in 0..z.len() {
        let fit = b + (0..d).map(|j| w[j] * x(i, j)).sum::<f64>();
        ss_res += pi[i] * (y[i] - fit).powi(2);
        ss_tot += pi[i] * (y[i] - mean_y).powi(2);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res <= 1e-24 { 1.0 } else { 0.0 };
    Ok((w, b, r2.clamp(0.0, 1.0)))
}

/// Solves `A x = b` for symmetric positive definite `A` (overwritten).
fn cholesky_solve(a: &mut [f64], b: &[f64], d: usize) -> Result<Vec<f64>> {
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if !(s > 0.0) {
            return Err(Error::Numeric {
                context: "explain surrogate".into(),
                detail: "normal equations are not positive definite".into(),
            });
        }
        let l = s.sqrt();
        a[j * d + j] = l;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / l;
        }
    }
    let mut x = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            x[i] -= a[i * d + k] * x[k];
        }
        x[i] /= a[i * d + i];
    }
    for i in (0..d).rev() {
        for k in i + 1..d {
            x[i] -= a[k * d + i] * x[k];
        }
        x[i] /= a[i * d + i];
    }
    Ok(x)
}
