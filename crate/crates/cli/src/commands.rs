use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use consistent_attention::consistency::{project_consistent_oracle, solve_witness};
use consistent_attention::eval::{
    average_precision, curve_auc, iou_at_quantile, perturbation_curve, random_attribution, write_pgm,
    AttributionRecord, IOU_QUANTILES,
};
use consistent_attention::grid::{NeighborhoodMap, ProbabilityMap, SpatialGrid};
use consistent_attention::synth::{self, Dataset, IMAGE_SIDE};
use consistent_attention::toynet::{
    attributions, load_checkpoint, projected_attributions, save_checkpoint, train_with, ToyNet,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::config::RunConfig;
use crate::records;
use crate::Usage;

const SUMMARY: &str = "summary.json";
const SCORE_CHUNK: usize = 100;

pub fn run(name: &str, cfg: &RunConfig) -> Result<()> {
    match name {
        "synth" => synth(cfg),
        "train" => train(cfg),
        "project" => project(cfg),
        "witness" => witness(cfg),
        "attribute" => attribute(cfg),
        "perturb" => perturb(cfg),
        "eval" => eval(cfg),
        "report" => report(cfg),
        _ => unreachable!("unknown command {name}"),
    }
}

fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Usage(format!("--{} is required", key.replace('_', "-"))).into())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(consistent_attention::Error::from).with_context(|| format!("writing {}", path.display()))
}

fn read_json_map(path: &Path) -> Result<serde_json::Map<String, Value>> {
    if !path.exists() {
        return Ok(serde_json::Map::new());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))? {
        Value::Object(m) => Ok(m),
        _ => Err(consistent_attention::Error::Format(format!("{} is not a JSON object", path.display())).into()),
    }
}

fn merge_json(path: &Path, entries: impl IntoIterator<Item = (String, Value)>) -> Result<()> {
    let mut m = read_json_map(path)?;
    m.extend(entries);
    write(path, serde_json::to_string_pretty(&Value::Object(m))? + "\n")
}

/// Echoes the resolved configuration into `dir/config.json` under the command name.
fn echo_config(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    merge_json(&dir.join("config.json"), [(command.to_string(), serde_json::to_value(cfg)?)])
}

fn record_summary(dir: &Path, metrics: &[(&str, f64)]) -> Result<()> {
    merge_json(&dir.join(SUMMARY), metrics.iter().map(|(k, v)| (k.to_string(), Value::from(*v))))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = need(&cfg.out, "out")?;
    fs::create_dir_all(dir).map_err(consistent_attention::Error::from).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = need(&cfg.data, "data")?;
    synth::load(path).with_context(|| format!("loading {}", path.display()))
}

/// `(train, evaluation)` split: the last `holdout` samples are held out.
/// Without a holdout both parts are the whole dataset.
fn split(cfg: &RunConfig, data: Dataset) -> Result<(Dataset, Option<Dataset>)> {
    if cfg.holdout == 0 {
        return Ok((data, None));
    }
    if cfg.holdout >= data.len() {
        return Err(Usage(format!("holdout {} leaves no training data ({} samples)", cfg.holdout, data.len())).into());
    }
    let n = data.len() - cfg.holdout;
    let (a, b) = data.split_at(n);
    Ok((a, Some(b)))
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let out = need(&cfg.out, "out")?;
    let ds = synth::generate(&cfg.dataset_spec())?;
    synth::save(&ds, out).with_context(|| format!("writing {}", out.display()))?;
    let mut echo = out.as_os_str().to_owned();
    echo.push(".config.json");
    merge_json(Path::new(&echo), [("synth".to_string(), serde_json::to_value(cfg)?)])?;
    let pos = ds.samples.iter().filter(|s| s.label == 1).count();
    println!("wrote {} samples ({pos} positive) to {}", ds.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    echo_config(dir, "train", cfg)?;
    let (data, monitor) = split(cfg, load_data(cfg)?)?;
    let outcome = train_with(&data, monitor.as_ref(), &cfg.train_config(), |m| {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.4}"));
        eprintln!(
            "epoch {:>3}  loss {}  ce {:.4}  penalty {}  residual {}  acc {:.4}",
            m.epoch,
            opt(m.train_loss),
            m.eval.ce,
            opt(m.eval.penalty),
            opt(m.eval.residual),
            m.eval.accuracy
        );
    })?;
    save_checkpoint(&outcome.model, &dir.join("checkpoint.catn"))?;
    write(&dir.join("metrics.csv"), outcome.log.to_csv())?;
    let last = outcome.log.last().expect("epoch 0 is always logged").eval;
    let mut summary = vec![("accuracy", last.accuracy), ("ce", last.ce)];
    summary.extend(last.penalty.map(|p| ("penalty", p)));
    summary.extend(last.residual.map(|r| ("residual", r)));
    record_summary(dir, &summary)?;
    println!("trained {} for {} epochs; final accuracy {:.4}", cfg.variant, cfg.epochs, last.accuracy);
    Ok(())
}

fn read_map(path: &Path) -> Result<ProbabilityMap> {
    let f = fs::File::open(path).map_err(consistent_attention::Error::from).with_context(|| format!("opening {}", path.display()))?;
    ProbabilityMap::read_csv(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn check_side(grid: SpatialGrid, want: Option<usize>, key: &str) -> Result<()> {
    if let Some(n) = want {
        let side = if grid.is_line() { grid.cols() } else { grid.side().unwrap_or(0) };
        if side != n {
            return Err(Usage(format!("--{key} {n} does not match the {grid} map")).into());
        }
    }
    Ok(())
}

fn tau_pair(cfg: &RunConfig) -> Result<(ProbabilityMap, ProbabilityMap, NeighborhoodMap)> {
    let tf = read_map(need(&cfg.tau_fine, "tau_fine")?)?;
    let tc = read_map(need(&cfg.tau_coarse, "tau_coarse")?)?;
    check_side(tf.grid(), cfg.fine, "fine")?;
    check_side(tc.grid(), cfg.coarse, "coarse")?;
    let nmap = NeighborhoodMap::blocks(tf.grid(), tc.grid())?;
    Ok((tf, tc, nmap))
}

fn project(cfg: &RunConfig) -> Result<()> {
    let (tf, tc, nmap) = tau_pair(cfg)?;
    let pair = project_consistent_oracle(&tf, &tc, &nmap, cfg.oracle_tol)?;
    let dir = out_dir(cfg)?;
    echo_config(dir, "project", cfg)?;
    let mut buf = Vec::new();
    pair.mu_fine.write_csv(&mut buf)?;
    write(&dir.join("mu_fine.csv"), &buf)?;
    buf.clear();
    pair.mu_coarse.write_csv(&mut buf)?;
    write(&dir.join("mu_coarse.csv"), &buf)?;
    record_summary(dir, &[("objective", pair.objective), ("marginal_residual", pair.residual)])?;
    println!("objective {:.17e} residual {:.3e} iterations {}", pair.objective, pair.residual, pair.iterations);
    Ok(())
}

fn witness(cfg: &RunConfig) -> Result<()> {
    let (tf, tc, nmap) = tau_pair(cfg)?;
    let w = solve_witness(&tf, &tc, &nmap)?;
    let mut csv = String::new();
    for row in w.lambda().chunks(tc.grid().cols()) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(csv, "{}", cells.join(","))?;
    }
    match &cfg.out {
        Some(_) => {
            let dir = out_dir(cfg)?;
            echo_config(dir, "witness", cfg)?;
            write(&dir.join("lambda.csv"), csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn attribute(cfg: &RunConfig) -> Result<()> {
    let (train_part, held) = split(cfg, load_data(cfg)?)?;
    let data = held.unwrap_or(train_part);
    let images: Vec<&[f32]> = data.samples.iter().map(|s| s.image.as_slice()).collect();
    let maps = if cfg.random_attribution {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        images.iter().map(|i| random_attribution(i.len(), &mut rng)).collect()
    } else {
        let path = need(&cfg.checkpoint, "checkpoint")?;
        let model = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        if cfg.projected {
            projected_attributions(&model, &images, cfg.site, cfg.oracle_tol)?
        } else {
            attributions(&model, &images, cfg.site)?
        }
    };
    let recs = data
        .samples
        .iter()
        .zip(maps)
        .map(|(s, a)| {
            let mask = (s.mask_area() > 0).then(|| s.mask.clone());
            AttributionRecord::new(a, s.image.clone(), s.label, mask)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let dir = out_dir(cfg)?;
    echo_config(dir, "attribute", cfg)?;
    let adir = dir.join("attributions");
    let hdir = dir.join("heatmaps");
    for d in [&adir, &hdir] {
        fs::create_dir_all(d).map_err(consistent_attention::Error::from)?;
    }
    records::save(&recs, &adir.join("records.bin"))?;
    for (i, r) in recs.iter().take(cfg.heatmaps).enumerate() {
        let mut pgm = Vec::new();
        write_pgm(&r.attribution, IMAGE_SIDE, IMAGE_SIDE, &mut pgm)?;
        write(&hdir.join(format!("record_{i:04}.pgm")), pgm)?;
        let mut csv = String::new();
        for row in r.attribution.chunks(IMAGE_SIDE) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(csv, "{}", cells.join(","))?;
        }
        write(&hdir.join(format!("record_{i:04}.csv")), csv)?;
    }
    println!("wrote {} attribution records to {}", recs.len(), adir.display());
    Ok(())
}

fn load_records(cfg: &RunConfig, dir: &Path) -> Result<Vec<AttributionRecord>> {
    let adir = cfg.attributions.clone().unwrap_or_else(|| dir.join("attributions"));
    records::load(&adir.join("records.bin"))
}

fn perturb(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let recs = load_records(cfg, dir)?;
    let path = need(&cfg.checkpoint, "checkpoint")?;
    let scorer: ToyNet = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let fractions = cfg.fractions()?;
    let curve = perturbation_curve(
        |imgs| {
            let mut preds = Vec::with_capacity(imgs.len());
            for chunk in imgs.chunks(SCORE_CHUNK) {
                preds.extend(scorer.predict(chunk)?);
            }
            Ok(preds)
        },
        &recs,
        &fractions,
    )?;
    let auc = curve_auc(&curve);
    echo_config(dir, "perturb", cfg)?;
    write(&dir.join("perturbation.csv"), curve.to_csv())?;
    record_summary(dir, &[("perturbation_auc", auc)])?;
    println!("auc {auc:.4}");
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let recs = load_records(cfg, dir)?;
    let mut csv = String::from("record_id,ap,iou_q975,iou_q95,iou_q90\n");
    let (mut ap_sum, mut iou_sum, mut n) = (0.0, [0.0; 3], 0usize);
    for (id, r) in recs.iter().enumerate() {
        let Some(mask) = &r.mask else { continue };
        let ap = average_precision(&r.attribution, mask)?;
        let mut ious = [0.0; 3];
        for (slot, q) in ious.iter_mut().zip(IOU_QUANTILES) {
            *slot = iou_at_quantile(&r.attribution, mask, q)?;
        }
        writeln!(csv, "{id},{ap},{},{},{}", ious[0], ious[1], ious[2])?;
        ap_sum += ap;
        iou_sum.iter_mut().zip(ious).for_each(|(s, v)| *s += v);
        n += 1;
    }
    if n == 0 {
        return Err(Usage("no attribution record has a mask".into()).into());
    }
    let map = 100.0 * ap_sum / n as f64;
    let iou = iou_sum.map(|s| s / n as f64);
    echo_config(dir, "eval", cfg)?;
    write(&dir.join("segmentation.csv"), csv)?;
    record_summary(dir, &[("map", map), ("iou_q975", iou[0]), ("iou_q95", iou[1]), ("iou_q90", iou[2])])?;
    println!("map {map:.4} mean_iou q975 {:.4} q95 {:.4} q90 {:.4} over {n} records", iou[0], iou[1], iou[2]);
    Ok(())
}

fn report(cfg: &RunConfig) -> Result<()> {
    if cfg.runs.is_empty() {
        return Err(Usage("--runs needs at least one run directory".into()).into());
    }
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in &cfg.runs {
        let path = run.join(SUMMARY);
        if !path.exists() {
            return Err(consistent_attention::Error::Format(format!("{} is missing", path.display())).into());
        }
        for (k, v) in read_json_map(&path)? {
            let v = v
                .as_f64()
                .ok_or_else(|| consistent_attention::Error::Format(format!("{}: {k} is not a number", path.display())))?;
            values.entry(k).or_default().push(v);
        }
    }
    let mut csv = String::from("metric,mean,std,n\n");
    for (k, v) in &values {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        writeln!(csv, "{k},{mean},{std},{}", v.len())?;
    }
    match &cfg.out {
        Some(_) => {
            let dir = out_dir(cfg)?;
            echo_config(dir, "report", cfg)?;
            write(&dir.join("report.csv"), &csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}
