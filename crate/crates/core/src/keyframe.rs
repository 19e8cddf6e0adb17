//! Key-frame selection by color-histogram clustering.
//!
//! Each frame is summarized by a normalized `8 x 8 x 8` RGB histogram. The
//! histograms are clustered with seeded k-means++ under the L1 metric and the
//! member closest to each centroid represents its cluster.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frame::Frame;

pub const BINS_PER_CHANNEL: usize = 8;
pub const HISTOGRAM_BINS: usize = BINS_PER_CHANNEL * BINS_PER_CHANNEL * BINS_PER_CHANNEL;
const MAX_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameHistogram {
    pub bins: Vec<f64>,
    pub frame_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeyframeSelection {
    /// Selected frame indices, strictly increasing.
    pub indices: Vec<usize>,
    /// L1 histogram contrast of each selected frame against the frame before
    /// it (zero for the first frame of the video).
    pub scores: Vec<f64>,
}

fn channel_bin(v: f32) -> usize {
    let v = (v as f64).clamp(0.0, 1.0 - f64::EPSILON);
    (v * BINS_PER_CHANNEL as f64).floor() as usize
}

/// Flat bin index `r * 64 + g * 8 + b`.
pub fn bin_index(rgb: [f32; 3]) -> usize {
    let [r, g, b] = rgb.map(channel_bin);
    (r * BINS_PER_CHANNEL + g) * BINS_PER_CHANNEL + b
}

pub fn rgb_histogram(frame: &Frame) -> Result<FrameHistogram> {
    let n = frame.pixel_count();
    if n == 0 {
        return Err(Error::contract("cannot build a histogram of a zero-pixel frame"));
    }
    let mut bins = vec![0.0; HISTOGRAM_BINS];
    for p in frame.pixels() {
        bins[bin_index(p)] += 1.0;
    }
    let inv = 1.0 / n as f64;
    bins.iter_mut().for_each(|b| *b *= inv);
    Ok(FrameHistogram {
        bins,
        frame_index: frame.index,
    })
}

pub fn histogram_distance(a: &FrameHistogram, b: &FrameHistogram) -> f64 {
    l1(&a.bins, &b.bins)
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Index of the smallest value; ties go to the lowest index.
fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Picks `k` representative frames. Deterministic in `(pixels, k, seed)`;
/// the input order does not matter, only the frame indices. Asking for at
/// least as many frames as exist returns all of them.
pub fn select_keyframes(frames: &[Frame], k: usize, seed: u64) -> Result<KeyframeSelection> {
    if k == 0 {
        return Err(Error::config("key-frame count must be at least 1"));
    }
    let mut sorted: Vec<&Frame> = frames.iter().collect();
    sorted.sort_by_key(|f| f.index);
    if sorted.windows(2).any(|w| w[0].index == w[1].index) {
        return Err(Error::contract("frame indices must be unique within a video"));
    }
    let hists: Vec<FrameHistogram> = sorted
        .par_iter()
        .map(|f| rgb_histogram(f))
        .collect::<Result<_>>()?;
    let n = hists.len();

    let positions: Vec<usize> = if k >= n {
        (0..n).collect()
    } else {
        let assignment = kmeans(&hists, k, seed);
        let mut reps = representatives(&hists, &assignment.labels, &assignment.centroids);
        reps.sort_unstable();
        reps
    };

    let scores = positions
        .iter()
        .map(|&p| if p == 0 { 0.0 } else { histogram_distance(&hists[p], &hists[p - 1]) })
        .collect();
    Ok(KeyframeSelection {
        indices: positions.iter().map(|&p| hists[p].frame_index).collect(),
        scores,
    })
}

struct Clustering {
    labels: Vec<usize>,
    centroids: Vec<Vec<f64>>,
}

fn kmeans(hists: &[FrameHistogram], k: usize, seed: u64) -> Clustering {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(hists, k, &mut rng);
    let mut labels = vec![usize::MAX; hists.len()];
    for _ in 0..MAX_ITERATIONS {
        let mut next: Vec<usize> = hists
            .iter()
            .map(|h| argmin(centroids.iter().map(|c| l1(&h.bins, c))))
            .collect();
        fill_empty_clusters(hists, &mut next, &centroids);
        if next == labels {
            break;
        }
        labels = next;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&FrameHistogram> =
                hists.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(h, _)| h).collect();
            let inv = 1.0 / members.len() as f64;
            centroid.iter_mut().for_each(|v| *v = 0.0);
            for m in members {
                centroid.iter_mut().zip(&m.bins).for_each(|(a, b)| *a += b * inv);
            }
        }
    }
    Clustering { labels, centroids }
}

/// k-means++ seeding: the first center is uniform, each further center is
/// drawn with probability proportional to the squared L1 distance to the
/// nearest chosen center. When every remaining distance is zero the lowest
/// unchosen position is taken.
fn kmeans_pp_init(hists: &[FrameHistogram], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = hists.len();
    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < k {
        let weights: Vec<f64> = hists
            .iter()
            .map(|h| {
                let d = chosen
                    .iter()
                    .map(|&c| l1(&h.bins, &hists[c].bins))
                    .fold(f64::INFINITY, f64::min);
                d * d
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut cumulative = 0.0;
            let last_positive = weights.iter().rposition(|&w| w > 0.0).expect("total > 0");
            weights
                .iter()
                .position(|&w| {
                    cumulative += w;
                    cumulative > target
                })
                .unwrap_or(last_positive)
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k < n")
        };
        chosen.push(pick);
    }
    chosen.iter().map(|&c| hists[c].bins.clone()).collect()
}

/// Moves the member farthest from its centroid into each empty cluster,
/// never emptying a donor cluster.
fn fill_empty_clusters(hists: &[FrameHistogram], labels: &mut [usize], centroids: &[Vec<f64>]) {
    let k = centroids.len();
    for c in 0..k {
        if labels.contains(&c) {
            continue;
        }
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let donor = (0..hists.len())
            .filter(|&i| counts[labels[i]] > 1)
            .map(|i| (i, l1(&hists[i].bins, &centroids[labels[i]])))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = donor {
            labels[i] = c;
        }
    }
}

fn representatives(hists: &[FrameHistogram], labels: &[usize], centroids: &[Vec<f64>]) -> Vec<usize> {
    centroids
        .iter()
        .enumerate()
        .filter_map(|(c, centroid)| {
            let members: Vec<usize> = (0..hists.len()).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                return None;
            }
            let best = argmin(members.iter().map(|&i| l1(&hists[i].bins, centroid)));
            Some(members[best])
        })
        .collect()
}
