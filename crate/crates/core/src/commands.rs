//! The command-line operations, callable without going through argument parsing.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, ImageId, Split};
use crate::model::Model;
use crate::pnm::{load_image, save_image, save_map};
use crate::retrieval::{
    build_index, evaluate, parse_rankfile, rerank, retrieve, EmbeddingIndex, EvalConfig,
    EvalReport, FusionConfig, RankedList,
};
use crate::synth::{generate, parse_attribute_spec, SynthSpec};
use crate::train::{train_stage1, train_stage2, EpochLoss, TrainState};

pub fn gen_data(
    out: &Path,
    attributes: &str,
    per_value: usize,
    side: usize,
    noise: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    let spec = SynthSpec {
        attributes: parse_attribute_spec(attributes)?,
        per_value,
        side,
        noise,
        seed,
    };
    generate(&spec, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelection {
    One,
    Two,
    Both,
}

impl StageSelection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(StageSelection::One),
            "2" => Ok(StageSelection::Two),
            "both" => Ok(StageSelection::Both),
            other => Err(Error::Config(format!(
                "stage must be 1, 2 or both, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub stage: StageSelection,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    /// Overrides the config file's seed.
    pub seed: Option<u64>,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

/// Path of the loss trace written next to a checkpoint.
pub fn loss_trace_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".losses.csv");
    PathBuf::from(name)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

/// Trains the requested stages, checkpointing to `args.out` after every epoch
/// and once more at the end with the selected parameters.
pub fn train(args: &TrainArgs) -> Result<Vec<EpochLoss>> {
    let mut run = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    let manifest = DatasetManifest::load(&args.data)?;
    let model_cfg = run.model_config(manifest.attributes.len())?;
    let data = Dataset::from_manifest(
        args.data.clone(),
        manifest,
        model_cfg.global_backbone.input_side,
    )?;

    let (mut model, mut state) = match &args.resume {
        Some(path) => {
            let (model, state) = load_checkpoint(path)?;
            if model.config != model_cfg {
                return Err(Error::Compat(format!(
                    "{} was trained with {:?}, the config asks for {:?}",
                    path.display(),
                    model.config,
                    model_cfg
                )));
            }
            (model, state)
        }
        None => {
            if args.stage == StageSelection::Two {
                return Err(Error::Config(
                    "stage 2 needs --resume with a stage-1 checkpoint".into(),
                ));
            }
            (
                Model::init(model_cfg, run.train.seed)?,
                TrainState::fresh(run.train.adam),
            )
        }
    };

    if args.stage == StageSelection::One && state.stage == 2 {
        return Err(Error::Config("checkpoint is already in stage 2".into()));
    }

    let trace_path = loss_trace_path(&args.out);
    let mut trace_file = if args.resume.is_some() && trace_path.exists() {
        OpenOptions::new().append(true).open(&trace_path)
    } else {
        fs::write(&trace_path, format!("{}\n", EpochLoss::CSV_HEADER))
            .map_err(|e| Error::io(&trace_path, e))?;
        OpenOptions::new().append(true).open(&trace_path)
    }
    .map_err(|e| Error::io(&trace_path, e))?;

    let out = args.out.clone();
    let verbose = args.verbose;
    let mut hook = |m: &Model, st: &TrainState, row: &EpochLoss| -> Result<()> {
        save_checkpoint(m, st, &out)?;
        writeln!(trace_file, "{}", row.csv_row()).map_err(|e| Error::io(&trace_path, e))?;
        if verbose {
            let val = row
                .val_map
                .map_or(String::new(), |v| format!(" val MAP {v:.4}"));
            eprintln!(
                "stage {} epoch {}: L_g {:.4} L_l {:.4} L_a {:.4} joint {:.4}{val}",
                row.stage, row.epoch, row.l_g, row.l_l, row.l_a, row.joint
            );
        }
        Ok(())
    };

    let mut trace = Vec::new();
    if args.stage == StageSelection::One || (args.stage == StageSelection::Both && state.stage == 1)
    {
        trace.extend(train_stage1(
            &mut model, &mut state, &data, &run.train, &mut hook,
        )?);
    }
    if matches!(args.stage, StageSelection::Two | StageSelection::Both) {
        trace.extend(train_stage2(
            &mut model, &mut state, &data, &run.train, &mut hook,
        )?);
    }
    save_checkpoint(&model, &state, &args.out)?;
    Ok(trace)
}

pub fn parse_split(s: &str) -> Result<Split> {
    match Split::parse(s)? {
        Split::Train => Err(Error::Config("choose the val or test split".into())),
        split => Ok(split),
    }
}

pub fn embed(
    data: &Path,
    ckpt: &Path,
    split: Split,
    out: &Path,
    config: Option<&Path>,
) -> Result<EmbeddingIndex> {
    let run = load_config(config)?;
    let manifest = DatasetManifest::load(data)?;
    let (model, _) = load_checkpoint(ckpt)?;
    if model.config.n_attributes != manifest.attributes.len() {
        return Err(Error::Compat(format!(
            "checkpoint has {} attributes, dataset {}",
            model.config.n_attributes,
            manifest.attributes.len()
        )));
    }
    let attributes: Vec<usize> = (0..manifest.attributes.len()).collect();
    let index = build_index(
        data,
        &manifest,
        split,
        &model,
        &attributes,
        &run.train.localization,
    )?;
    index.save(out)?;
    Ok(index)
}

fn fusion(lambda: Option<f64>) -> Result<FusionConfig> {
    lambda.map_or_else(|| Ok(FusionConfig::default()), FusionConfig::new)
}

pub fn retrieve_cmd(
    index: &Path,
    query: ImageId,
    attribute: usize,
    k: usize,
    lambda: Option<f64>,
) -> Result<RankedList> {
    let index = EmbeddingIndex::load(index)?;
    retrieve(&index, query, attribute, k, &fusion(lambda)?)
}

pub fn eval_cmd(
    index: &Path,
    split: Split,
    k: usize,
    lambda: Option<f64>,
) -> Result<(EvalReport, EmbeddingIndex)> {
    let index = EmbeddingIndex::load(index)?;
    if index.split != split {
        return Err(Error::Data(format!(
            "index holds the {} split, not {}",
            index.split.as_str(),
            split.as_str()
        )));
    }
    let cfg = EvalConfig {
        fusion: fusion(lambda)?,
        k,
        ..EvalConfig::default()
    };
    Ok((evaluate(&index, &cfg)?, index))
}

pub fn parse_ids(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad attribute id {t:?} in {s:?}")))
        })
        .collect()
}

pub fn rerank_cmd(
    index: &Path,
    baseline: &Path,
    attributes: &[usize],
    top_n: usize,
    lambda: Option<f64>,
) -> Result<Vec<RankedList>> {
    let index = EmbeddingIndex::load(index)?;
    let text = fs::read_to_string(baseline).map_err(|e| Error::io(baseline, e))?;
    let cfg = fusion(lambda)?;
    parse_rankfile(&text)?
        .iter()
        .map(|list| rerank(list, attributes, &index, &cfg, top_n))
        .collect()
}

/// Writes the image, its attention map, heatmap, binary mask and RoI for one attribute.
pub fn attention_cmd(
    data: &Path,
    ckpt: &Path,
    image: ImageId,
    attribute: usize,
    out: &Path,
    config: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let run = load_config(config)?;
    let manifest = DatasetManifest::load(data)?;
    let (model, _) = load_checkpoint(ckpt)?;
    let record = manifest
        .record(image)
        .ok_or_else(|| Error::Data(format!("no image {image} in the manifest")))?;
    let img = load_image(
        data.join(&record.path),
        model.config.global_backbone.input_side,
    )?;
    let e = model.embed(&img, attribute, &run.train.localization)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let paths: Vec<PathBuf> = [
        "image.ppm",
        "alpha_s.pgm",
        "heatmap.pgm",
        "binary.pgm",
        "roi.ppm",
        "bbox.txt",
    ]
    .iter()
    .map(|n| out.join(n))
    .collect();
    save_image(&img, &paths[0])?;
    save_map(&e.global.alpha_s, &paths[1])?;
    save_map(&e.localization.heatmap, &paths[2])?;
    save_map(&e.localization.binary.to_tensor(), &paths[3])?;
    save_image(&e.localization.roi, &paths[4])?;
    let b = e.localization.bbox;
    let s = e.localization.square;
    let text = format!(
        "bbox {} {} {} {}\nsquare {} {} {} {}\nregions {}\n",
        b.row0,
        b.col0,
        b.row1,
        b.col1,
        s.row0,
        s.col0,
        s.row1,
        s.col1,
        e.localization.regions.len()
    );
    fs::write(&paths[5], text).map_err(|e| Error::io(&paths[5], e))?;
    Ok(paths)
}
