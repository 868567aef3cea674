use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nets::{Condition, DenoiserNet};
use crate::par::{self, Strategy};
use crate::rng::RngStream;
use crate::sampler::{denoise_rows, NoisePredictor, RowGuidance};
use crate::schedule::NoiseSchedule;
use crate::tensor::{stack_rows, unstack_rows, Tensor};

/// Pairs generated per worker task.
const PAIR_CHUNK: usize = 64;

/// A starting noise, its class, and the guided sample it leads to.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePair {
    pub x_t: Tensor,
    pub class: usize,
    pub x0_guide: Tensor,
    pub w_used: f64,
    pub s_used: f64,
    pub quality: f64,
}

/// Negated class-conditional denoising loss `-E ||eps - eps(x_t, t, c)||^2`
/// over `draws` random `(t, eps)`. Higher is better.
pub fn quality_score(
    x0: &Tensor,
    class: usize,
    net: &DenoiserNet,
    schedule: &NoiseSchedule,
    draws: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let row = Array2::from_shape_vec((1, x0.len()), x0.data().to_vec()).expect("row shape");
    Ok(score_rows(&row, &[class], net, schedule, draws, &mut [rng])?[0])
}

/// Batched [`quality_score`]; row `i` draws from stream `("quality", first_index + i)`.
pub fn quality_scores_rows(
    x0: &Array2<f64>,
    classes: &[usize],
    net: &DenoiserNet,
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
    first_index: usize,
) -> Result<Vec<f64>> {
    let mut streams: Vec<RngStream> =
        (0..x0.nrows()).map(|i| RngStream::derive(seed, "quality", (first_index + i) as u64)).collect();
    let mut refs: Vec<&mut RngStream> = streams.iter_mut().collect();
    score_rows(x0, classes, net, schedule, draws, &mut refs)
}

fn score_rows(
    x0: &Array2<f64>,
    classes: &[usize],
    net: &DenoiserNet,
    schedule: &NoiseSchedule,
    draws: usize,
    rngs: &mut [&mut RngStream],
) -> Result<Vec<f64>> {
    if draws == 0 {
        return Err(Error::InvalidRange("quality score needs at least one draw".into()));
    }
    let (n, d) = x0.dim();
    let mut xt = Array2::zeros((n * draws, d));
    let mut eps = Array2::zeros((n * draws, d));
    let mut ts = Vec::with_capacity(n * draws);
    let mut conds = Vec::with_capacity(n * draws);
    for i in 0..n {
        for j in 0..draws {
            let r = i * draws + j;
            let t = 1 + rngs[i].below(schedule.steps());
            let e = rngs[i].normal_vec(d);
            let a = schedule.alpha(t);
            for k in 0..d {
                eps[[r, k]] = e[k];
                xt[[r, k]] = a.sqrt() * x0[[i, k]] + (1.0 - a).sqrt() * e[k];
            }
            ts.push(t);
            conds.push(Condition::Class(classes[i]));
        }
    }
    let pred = net.predict_rows(&xt, &ts, &conds)?;
    let err = (&pred - &eps).mapv(|v| v * v);
    Ok((0..n)
        .map(|i| {
            let total: f64 = (0..draws).map(|j| err.row(i * draws + j).sum()).sum();
            -total / draws as f64
        })
        .collect())
}

/// Draws `count` pairs: pair `i` has class `i % num_classes`, Gaussian `x_T`
/// and guidance scales from its own stream, and a target produced by guided
/// sampling with `cfg.guided_steps` steps.
#[allow(clippy::too_many_arguments)]
pub fn gen_pairs(
    net: &DenoiserNet,
    degraded: Option<&dyn NoisePredictor>,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    count: usize,
    seed: u64,
    strategy: Strategy,
) -> Result<Vec<NoisePair>> {
    cfg.validate()?;
    let arch = net.arch();
    let (nc, d) = (arch.num_classes, arch.image_dim());
    let ranges = par::chunk_ranges(count, PAIR_CHUNK);
    let chunks = par::try_map_indexed(ranges.len(), strategy, |ci| {
        let range = ranges[ci].clone();
        let n = range.len();
        let mut x_t = Array2::zeros((n, d));
        let (mut w, mut s, mut classes) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for (row, i) in range.clone().enumerate() {
            let mut rng = RngStream::derive(seed, "pair", i as u64);
            x_t.row_mut(row).assign(&ndarray::Array1::from(rng.normal_vec(d)));
            w.push(rng.uniform(cfg.w_range.0, cfg.w_range.1));
            s.push(rng.uniform(cfg.s_range.0, cfg.s_range.1));
            classes.push(i % nc);
        }
        let conds: Vec<Condition> = classes.iter().map(|&c| Condition::Class(c)).collect();
        let g = RowGuidance { w: w.clone(), s: s.clone(), degraded };
        let x0 = denoise_rows(&x_t, &conds, net, schedule, cfg.guided_steps, Some(&g))?;
        let q = quality_scores_rows(&x0, &classes, net, schedule, cfg.quality_draws, seed, range.start)?;
        let shape = &arch.image_shape;
        Ok::<_, Error>(
            (0..n)
                .map(|r| NoisePair {
                    x_t: Tensor::from_row(x_t.row(r), shape),
                    class: classes[r],
                    x0_guide: Tensor::from_row(x0.row(r), shape),
                    w_used: w[r],
                    s_used: s[r],
                    quality: q[r],
                })
                .collect::<Vec<_>>(),
        )
    })?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Keeps the `floor(n q / 100)` best pairs (at least one) by quality, ties
/// broken by position, returned in their original order.
pub fn filter_pairs(pairs: &[NoisePair], q: f64) -> Result<Vec<NoisePair>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("pairs to filter".into()));
    }
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::InvalidRange(format!("filter quantile must be in (0, 100], got {q}")));
    }
    let keep = ((pairs.len() as f64 * q / 100.0 + 1e-9).floor() as usize).max(1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[b].quality.total_cmp(&pairs[a].quality));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept.into_iter().map(|i| pairs[i].clone()).collect())
}

#[derive(Serialize, Deserialize)]
struct ArchiveIndex {
    count: usize,
    image_shape: Vec<usize>,
    records: Vec<ArchiveRecord>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveRecord {
    class: usize,
    w_used: f64,
    s_used: f64,
    quality: f64,
}

/// Writes `index.json`, `xT.nft` and `x0_guide.nft` under `dir`.
pub fn write_pair_archive(dir: &Path, pairs: &[NoisePair]) -> Result<()> {
    let first = pairs.first().ok_or_else(|| Error::EmptyInput("pair archive".into()))?;
    std::fs::create_dir_all(dir)?;
    let shape = first.x_t.shape().to_vec();
    let mut stacked = vec![pairs.len()];
    stacked.extend(&shape);
    for (name, field) in [("xT.nft", 0), ("x0_guide.nft", 1)] {
        let rows: Vec<Tensor> = pairs.iter().map(|p| if field == 0 { p.x_t.clone() } else { p.x0_guide.clone() }).collect();
        let m = stack_rows(&rows)?;
        let t = Tensor::new(stacked.clone(), m.into_raw_vec_and_offset().0)?;
        t.write_nft(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))?;
    }
    let index = ArchiveIndex {
        count: pairs.len(),
        image_shape: shape,
        records: pairs
            .iter()
            .map(|p| ArchiveRecord { class: p.class, w_used: p.w_used, s_used: p.s_used, quality: p.quality })
            .collect(),
    };
    std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn read_pair_archive(dir: &Path) -> Result<Vec<NoisePair>> {
    let index: ArchiveIndex = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
    let load = |name: &str| -> Result<Array2<f64>> {
        let t = Tensor::read_nft(std::io::BufReader::new(std::fs::File::open(dir.join(name))?))?;
        let d: usize = index.image_shape.iter().product();
        if t.len() != index.count * d {
            return Err(Error::Format(format!("{name} holds {} values, expected {}", t.len(), index.count * d)));
        }
        Ok(Array2::from_shape_vec((index.count, d), t.into_data()).expect("checked length"))
    };
    let xs = unstack_rows(&load("xT.nft")?, &index.image_shape);
    let gs = unstack_rows(&load("x0_guide.nft")?, &index.image_shape);
    if index.records.len() != index.count {
        return Err(Error::Format("pair index count does not match its records".into()));
    }
    Ok(index
        .records
        .into_iter()
        .zip(xs.into_iter().zip(gs))
        .map(|(r, (x_t, x0_guide))| NoisePair {
            x_t,
            class: r.class,
            x0_guide,
            w_used: r.w_used,
            s_used: r.s_used,
            quality: r.quality,
        })
        .collect())
}
