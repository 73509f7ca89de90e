use std::path::{Path, PathBuf};
use std::time::Instant;

use mrf_core::dict::{compress, compute_subspace, simulate_dictionary, CompressedDictionary, Dictionary, GridAxis};
use mrf_core::forward::AcquisitionModel;
use mrf_core::metrics::{compressed_dictionary_bytes, evaluate, format_table, to_pgm};
use mrf_core::nn::Network;
use mrf_core::phantom::{make_dataset, DatasetConfig, SampleInfo};
use mrf_core::proxnet::{
    encoder_spec, pretrain_encoder, train_bloch_decoder, train_pgdnet, Checkpoint, DecoderHyper, NormalizationSpec, PgdNet, Provenance,
    TrainHyper, TrainSample,
};
use mrf_core::recon_dm::{blip, build_fgm_index, dm_match, fgm_match, BlipOptions, Projection, QMaps};
use mrf_core::sampling::{default_masks, SamplingMask};
use mrf_core::seqsim::{build_sequence, SequenceConfig, SequenceParams};
use mrf_core::tensorfile::{hash_json, TensorFile};
use mrf_core::{MrfError, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifacts::*;
use crate::{Algo, Cli, Cmd, Stage};

pub const CONFIG_VERSION: u32 = 1;

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(MrfError::Param("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| MrfError::Usage(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed;
    match cli.cmd {
        Cmd::SimulateDict { grid, seq, out } => simulate_dict(&grid, seq.as_deref(), &out),
        Cmd::BuildSubspace { dict, s, out } => build_subspace(&dict, s, &out),
        Cmd::MakeMasks { n, l, full, out } => make_masks(n, l, full, &out),
        Cmd::GenData { config, out } => gen_data(&config, &out, seed),
        Cmd::Recon {
            algo,
            input,
            masks,
            subspace,
            dict,
            ckpt,
            out,
            keep,
            groups,
            trace,
        } => recon(&ReconArgs {
            algo,
            input,
            masks,
            subspace,
            dict,
            ckpt,
            out,
            keep,
            groups,
            trace,
            seed,
        }),
        Cmd::Train { stage, config } => train(stage, &config, seed),
        Cmd::Evaluate { est, gt, report, pgm, label } => evaluate_cmd(&est, &gt, &report, pgm.as_deref(), &label),
    }
}

fn parse_grid(text: &str) -> Result<(GridAxis, GridAxis)> {
    let (a, b) = text
        .split_once('x')
        .ok_or_else(|| MrfError::Param(format!("grid '{text}' must look like t1start:step:stop x t2start:step:stop")))?;
    Ok((GridAxis::parse(a)?, GridAxis::parse(b)?))
}

fn simulate_dict(grid: &str, seq_path: Option<&Path>, out: &Path) -> Result<()> {
    let (t1, t2) = parse_grid(grid)?;
    let config = match seq_path {
        Some(p) => SequenceConfig::from_json(&std::fs::read_to_string(p)?)?,
        None => SequenceConfig::default(),
    };
    let seq = build_sequence(&config)?;
    let grid = mrf_core::dict::make_grid(t1, t2)?;
    let start = Instant::now();
    let d = simulate_dictionary(&grid, &seq)?;
    let elapsed = start.elapsed().as_secs_f64();
    dictionary_file(&d, t1, t2, &seq)?.write(out)?;
    println!("atoms {} frames {} time_s {elapsed:.3}", d.len(), d.l);
    Ok(())
}

fn build_subspace(dict_path: &Path, s: usize, out: &Path) -> Result<()> {
    let tf = read_kind(dict_path, "dictionary")?;
    let (d, _) = dictionary_from(&tf)?;
    let sub = compute_subspace(&d, s)?;
    subspace_file(&sub, &tf)?.write(out)?;
    let err = mrf_core::dict::projection_error(&d, &sub)?;
    println!("subspace dims [{}, {}] relative_error {err:.3e}", sub.l, sub.s);
    Ok(())
}

fn make_masks(n: usize, l: usize, full: bool, out: &Path) -> Result<()> {
    let mask = if full { SamplingMask::full(n, l) } else { default_masks(n, l)? };
    mask_file(&mask)?.write(out)?;
    let m = mask.m_per_frame();
    println!(
        "frames {} samples_min {} samples_max {} samples_mean {:.1} coverage {:.4}",
        m.len(),
        m.iter().min().unwrap_or(&0),
        m.iter().max().unwrap_or(&0),
        mask.total_samples() as f64 / m.len().max(1) as f64,
        mask.union_coverage()
    );
    Ok(())
}

/// Relative paths in configs are resolved against the config's directory.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| MrfError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_str(&text)?)
}

fn check_version(v: u32) -> Result<()> {
    if v != CONFIG_VERSION {
        return Err(MrfError::Param(format!("config version {v} unsupported (expected {CONFIG_VERSION})")));
    }
    Ok(())
}

/// Acquisition loaded from chained subspace and mask artifacts.
struct Acquisition {
    model: AcquisitionModel,
    seq: SequenceParams,
    subspace_tf: TensorFile,
    prov: Provenance,
}

fn load_acquisition(subspace: &Path, masks: &Path) -> Result<Acquisition> {
    let subspace_tf = read_kind(subspace, "subspace")?;
    let mask_tf = read_kind(masks, "masks")?;
    let (sub, seq) = subspace_from(&subspace_tf)?;
    let mask = mask_from(&mask_tf)?;
    if mask.len() != sub.l {
        return Err(MrfError::Param(format!("mask has {} frames, subspace {}", mask.len(), sub.l)));
    }
    let prov = Provenance {
        subspace: subspace_tf.content_hash(),
        mask: mask_tf.content_hash(),
        sequence: sequence_hash(&seq),
    };
    Ok(Acquisition {
        model: AcquisitionModel::new(mask, sub)?,
        seq,
        subspace_tf,
        prov,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataConfig {
    version: u32,
    subspace: PathBuf,
    masks: PathBuf,
    #[serde(default)]
    dataset: DatasetConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    info: SampleInfo,
    kspace: String,
    tsmi: String,
    maps: String,
    hashes: Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    config: DatasetConfig,
    normalization: NormalizationSpec,
    provenance: Provenance,
    train: Vec<ManifestEntry>,
    test: Vec<ManifestEntry>,
}

fn gen_data(config_path: &Path, out: &Path, seed: u64) -> Result<()> {
    let cfg: DataConfig = read_json(config_path)?;
    check_version(cfg.version)?;
    let acq = load_acquisition(&resolve(config_path, &cfg.subspace), &resolve(config_path, &cfg.masks))?;
    let dataset_cfg = DatasetConfig { seed, ..cfg.dataset };
    let start = Instant::now();
    let (sub, _) = subspace_from(&acq.subspace_tf)?;
    let ds = make_dataset(&dataset_cfg, &acq.model, &acq.seq, &sub)?;
    std::fs::create_dir_all(out)?;
    let write_split = |name: &str, samples: &[TrainSample], infos: &[SampleInfo]| -> Result<Vec<ManifestEntry>> {
        samples
            .iter()
            .zip(infos)
            .enumerate()
            .map(|(i, (s, info))| {
                let stem = format!("{name}_{i:04}");
                let files = [format!("{stem}_kspace.mrft"), format!("{stem}_tsmi.mrft"), format!("{stem}_maps.mrft")];
                let k = kspace_file(&s.y, &acq.prov)?;
                let x = tsmi_file(&s.x_target, json!({"subspace_hash": acq.prov.subspace}))?;
                let q = qmaps_file(&s.qmaps, json!({"source": "phantom"}))?;
                let hashes = json!({"kspace": k.content_hash(), "tsmi": x.content_hash(), "maps": q.content_hash()});
                k.write(&out.join(&files[0]))?;
                x.write(&out.join(&files[1]))?;
                q.write(&out.join(&files[2]))?;
                let [kspace, tsmi, maps] = files;
                Ok(ManifestEntry {
                    info: info.clone(),
                    kspace,
                    tsmi,
                    maps,
                    hashes,
                })
            })
            .collect()
    };
    let manifest = Manifest {
        version: CONFIG_VERSION,
        kind: "dataset".into(),
        config: dataset_cfg,
        normalization: ds.norm,
        provenance: acq.prov.clone(),
        train: write_split("train", &ds.train, &ds.train_info)?,
        test: write_split("test", &ds.test, &ds.test_info)?,
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("train {} test {} time_s {:.2}", ds.train.len(), ds.test.len(), start.elapsed().as_secs_f64());
    Ok(())
}

fn load_manifest(path: &Path, acq: &Acquisition) -> Result<(Manifest, Vec<TrainSample>)> {
    let manifest: Manifest = read_json(path)?;
    check_version(manifest.version)?;
    if manifest.provenance != acq.prov {
        return Err(MrfError::HashMismatch(format!("dataset {} was generated for a different subspace/mask/sequence", path.display())));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .train
        .iter()
        .map(|e| {
            let k = read_kind(&dir.join(&e.kspace), "kspace")?;
            let x = read_kind(&dir.join(&e.tsmi), "tsmi")?;
            let q = read_kind(&dir.join(&e.maps), "qmaps")?;
            for (tf, key) in [(&k, "kspace"), (&x, "tsmi"), (&q, "maps")] {
                if e.hashes.get(key).and_then(Value::as_str) != Some(tf.content_hash().as_str()) {
                    return Err(MrfError::HashMismatch(format!("{key} file of sample {:?} changed since generation", e.info)));
                }
            }
            let qmaps = qmaps_from(&q)?;
            Ok(TrainSample {
                y: kspace_from(&k)?,
                x_target: tsmi_from(&x)?,
                m_target: manifest.normalization.normalize(&qmaps),
                qmaps,
            })
        })
        .collect::<Result<_>>()?;
    Ok((manifest, samples))
}

/// Dictionary restricted to every `k`-th node of each grid axis.
fn decimate(d: &Dictionary, t1: GridAxis, t2: GridAxis, k: usize) -> Result<Dictionary> {
    if k <= 1 {
        return Ok(d.clone());
    }
    let t1k = GridAxis::new(t1.start, t1.step * k as f64, t1.stop);
    let t2k = GridAxis::new(t2.start, t2.step * k as f64, t2.stop);
    let grid = mrf_core::dict::make_grid(t1k, t2k)?;
    let mut atoms = Vec::with_capacity(grid.len() * d.l);
    for &(a, b) in &grid.entries {
        let i = d.grid.position(a, b).ok_or_else(|| MrfError::Param(format!("decimated node ({a}, {b}) not in dictionary")))?;
        atoms.extend_from_slice(d.atom(i));
    }
    Dictionary::from_atoms(atoms, d.l, grid)
}

fn load_cdict(dict_path: &Path, subspace_tf: &TensorFile, decimation: usize) -> Result<CompressedDictionary> {
    let tf = read_kind(dict_path, "dictionary")?;
    require_hash(subspace_tf, "dict_hash", &tf.content_hash(), "subspace")?;
    let (d, _) = dictionary_from(&tf)?;
    let d = decimate(&d, field(&tf, "t1_axis")?, field(&tf, "t2_axis")?, decimation)?;
    let (sub, _) = subspace_from(subspace_tf)?;
    compress(&d, &sub)
}

struct ReconArgs {
    algo: Algo,
    input: PathBuf,
    masks: PathBuf,
    subspace: PathBuf,
    dict: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    out: PathBuf,
    keep: f64,
    groups: Option<usize>,
    trace: Option<PathBuf>,
    seed: u64,
}

fn recon(a: &ReconArgs) -> Result<()> {
    let acq = load_acquisition(&a.subspace, &a.masks)?;
    let ktf = read_kind(&a.input, "kspace")?;
    require_hash(&ktf, "mask_hash", &acq.prov.mask, "k-space input")?;
    require_hash(&ktf, "subspace_hash", &acq.prov.subspace, "k-space input")?;
    let y = kspace_from(&ktf)?;
    let need = |p: &Option<PathBuf>, what: &str| -> Result<PathBuf> {
        p.clone().ok_or_else(|| MrfError::Usage(format!("--algo {:?} needs --{what}", a.algo).to_lowercase()))
    };
    let mut extra = json!({"algo": format!("{:?}", a.algo).to_lowercase(), "mask_hash": acq.prov.mask, "subspace_hash": acq.prov.subspace});
    let start;
    let (qmaps, memory) = match a.algo {
        Algo::Dm | Algo::Fgm | Algo::Blip => {
            let cdict = load_cdict(&need(&a.dict, "dict")?, &acq.subspace_tf, 1)?;
            let memory = compressed_dictionary_bytes(cdict.len(), cdict.s);
            let groups = a.groups.unwrap_or(((cdict.len() as f64).sqrt().round() as usize).max(1));
            start = Instant::now();
            let q = match a.algo {
                Algo::Dm => dm_match(&acq.model.adjoint(&y)?, &cdict)?,
                Algo::Fgm => {
                    let index = build_fgm_index(&cdict, groups, a.seed)?;
                    let (q, stats) = fgm_match(&acq.model.adjoint(&y)?, &index, &cdict, a.keep)?;
                    extra["correlations"] = json!(stats.correlations);
                    q
                }
                _ => {
                    let res = blip(&y, &acq.model, &cdict, Projection::Exhaustive, BlipOptions::default())?;
                    let trace_path = a.trace.clone().unwrap_or_else(|| PathBuf::from(format!("{}.trace.json", a.out.display())));
                    std::fs::write(&trace_path, serde_json::to_string_pretty(&res.trace)?)?;
                    extra["iterations"] = json!(res.trace.len());
                    res.qmaps
                }
            };
            (q, memory)
        }
        Algo::Pgdnet | Algo::Encoder => {
            let ckpt_path = need(&a.ckpt, "ckpt")?;
            let ck = Checkpoint::load(&ckpt_path)?;
            ck.verify(&acq.prov)?;
            let net = if a.algo == Algo::Encoder {
                PgdNet::new(ck.network("encoder")?.clone(), ck.network("decoder")?.clone(), 1, ck.norm)?
            } else {
                if ck.stage != "pgdnet" {
                    return Err(MrfError::Usage(format!("checkpoint stage '{}' is not a trained PGD-Net", ck.stage)));
                }
                ck.pgdnet()?
            };
            extra["checkpoint_hash"] = json!(TensorFile::read(&ckpt_path)?.content_hash());
            start = Instant::now();
            let (q, _) = mrf_core::proxnet::infer(&net, &y, &acq.model)?;
            (q, std::fs::metadata(&ckpt_path)?.len())
        }
    };
    let runtime = start.elapsed().as_secs_f64();
    extra["runtime_s"] = json!(runtime);
    extra["memory_bytes"] = json!(memory);
    extra["config_hash"] = json!(hash_json(&extra));
    qmaps_file(&qmaps, extra)?.write(&a.out)?;
    println!("algo {:?} foreground {} runtime_s {runtime:.4}", a.algo, qmaps.foreground_count());
    Ok(())
}

fn default_depth() -> usize {
    2
}

fn default_decimation() -> usize {
    1
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    version: u32,
    dict: PathBuf,
    subspace: PathBuf,
    masks: PathBuf,
    data: PathBuf,
    /// Grid decimation per axis for decoder pretraining.
    #[serde(default = "default_decimation")]
    decimate: usize,
    #[serde(default)]
    decoder: DecoderHyper,
    #[serde(default)]
    pretrain: TrainHyper,
    #[serde(default)]
    pgdnet: TrainHyper,
    #[serde(default = "default_depth")]
    depth: usize,
    /// Start PGD-Net from this checkpoint instead of the encoder stage.
    #[serde(default)]
    init: Option<PathBuf>,
    bloch_checkpoint: PathBuf,
    encoder_checkpoint: PathBuf,
    pgdnet_checkpoint: PathBuf,
}

fn train(stage: Stage, config_path: &Path, seed: u64) -> Result<()> {
    let cfg: TrainConfig = read_json(config_path)?;
    check_version(cfg.version)?;
    let path = |p: &Path| resolve(config_path, p);
    let acq = load_acquisition(&path(&cfg.subspace), &path(&cfg.masks))?;
    let config_json = serde_json::to_value(&cfg)?;
    let start = Instant::now();
    let (out, report) = match stage {
        Stage::Bloch => {
            let cdict = load_cdict(&path(&cfg.dict), &acq.subspace_tf, cfg.decimate)?;
            let hyper = DecoderHyper { seed, ..cfg.decoder.clone() };
            let norm = NormalizationSpec::new(1.0)?;
            let (dec, report) = train_bloch_decoder(&cdict, &norm, &hyper)?;
            let mut networks = std::collections::BTreeMap::new();
            networks.insert("decoder".to_string(), dec);
            let prov = Provenance {
                mask: String::new(),
                ..acq.prov.clone()
            };
            let ck = Checkpoint {
                stage: "bloch".into(),
                networks,
                alphas: Vec::new(),
                norm,
                provenance: prov,
                config: config_json,
            };
            let out = path(&cfg.bloch_checkpoint);
            ck.save(&out)?;
            println!("decoder train_nrmse {:.5} holdout_nrmse {:.5}", report.train_nrmse, report.holdout_nrmse);
            (out, serde_json::to_value(report)?)
        }
        Stage::Encoder | Stage::Pgdnet => {
            let (manifest, samples) = load_manifest(&path(&cfg.data), &acq)?;
            let (net, report) = if stage == Stage::Encoder {
                let bloch = Checkpoint::load(&path(&cfg.bloch_checkpoint))?;
                if bloch.provenance.subspace != acq.prov.subspace || bloch.provenance.sequence != acq.prov.sequence {
                    return Err(MrfError::HashMismatch("decoder checkpoint was trained on a different subspace".into()));
                }
                let decoder = bloch.network("decoder")?.clone();
                let mut encoder = Network::<f32>::from_spec(&encoder_spec(acq.model.s()), seed)?;
                let hyper = TrainHyper { seed, ..cfg.pretrain.clone() };
                let report = pretrain_encoder(&mut encoder, &decoder, manifest.normalization, &samples, &acq.model, &hyper)?;
                (PgdNet::new(encoder, decoder, 1, manifest.normalization)?, report)
            } else {
                let init = cfg.init.as_ref().map_or(path(&cfg.encoder_checkpoint), |p| path(p));
                let ck = Checkpoint::load(&init)?;
                ck.verify(&acq.prov)?;
                let mut net = ck.pgdnet()?.with_depth(cfg.depth)?;
                if ck.stage != "pgdnet" {
                    net.alphas.iter_mut().for_each(|a| *a = 1.0);
                }
                let hyper = TrainHyper { seed, ..cfg.pgdnet.clone() };
                let report = train_pgdnet(&mut net, &samples, &acq.model, &hyper)?;
                (net, report)
            };
            let stage_name = if stage == Stage::Encoder { "encoder" } else { "pgdnet" };
            let out = path(if stage == Stage::Encoder { &cfg.encoder_checkpoint } else { &cfg.pgdnet_checkpoint });
            Checkpoint::from_net(stage_name, &net, acq.prov.clone(), config_json).save(&out)?;
            println!(
                "stage {stage_name} epochs {} final_loss {:.6e} alphas {:?}",
                report.epoch_losses.len(),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                report.alphas
            );
            (out, serde_json::to_value(report)?)
        }
    };
    let report = json!({"stage": format!("{stage:?}").to_lowercase(), "time_s": start.elapsed().as_secs_f64(), "report": report});
    std::fs::write(format!("{}.report.json", out.display()), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn evaluate_cmd(est: &[PathBuf], gt: &[PathBuf], report_path: &Path, pgm: Option<&Path>, label: &str) -> Result<()> {
    if est.len() != gt.len() {
        return Err(MrfError::Usage(format!("{} --est files but {} --gt files", est.len(), gt.len())));
    }
    let load = |p: &PathBuf| -> Result<(QMaps, TensorFile)> {
        let tf = read_kind(p, "qmaps")?;
        Ok((qmaps_from(&tf)?, tf))
    };
    let est: Vec<(QMaps, TensorFile)> = est.iter().map(load).collect::<Result<_>>()?;
    let gt: Vec<QMaps> = gt.iter().map(|p| load(p).map(|x| x.0)).collect::<Result<_>>()?;
    let runtimes: Vec<f64> = est.iter().filter_map(|(_, tf)| tf.header.get("runtime_s").and_then(Value::as_f64)).collect();
    let runtime = (!runtimes.is_empty()).then(|| runtimes.iter().sum::<f64>() / runtimes.len() as f64);
    let memory = est[0].1.header.get("memory_bytes").and_then(Value::as_u64);
    let config_hash = hash_json(&est.iter().map(|(_, tf)| tf.header.get("config_hash").cloned().unwrap_or(Value::Null)).collect::<Vec<_>>());
    let maps: Vec<QMaps> = est.iter().map(|(q, _)| q.clone()).collect();
    let report = evaluate(&maps, &gt, runtime, memory, &config_hash)?;
    std::fs::write(report_path, serde_json::to_string_pretty(&report)?)?;
    let table = format_table(&[(label.to_string(), report)]);
    std::fs::write(report_path.with_extension("txt"), &table)?;
    print!("{table}");
    if let Some(dir) = pgm {
        std::fs::create_dir_all(dir)?;
        for (i, (e, g)) in maps.iter().zip(&gt).enumerate() {
            for (name, ev, gv) in [("t1", &e.t1_ms, &g.t1_ms), ("t2", &e.t2_ms, &g.t2_ms), ("pd", &e.pd, &g.pd)] {
                let err: Vec<f64> = ev.iter().zip(gv).map(|(a, b)| (a - b).abs()).collect();
                let max = gv.iter().copied().fold(0.0, f64::max);
                std::fs::write(dir.join(format!("slice{i:03}_{name}_abs_error.pgm")), to_pgm(&err, g.grid_n, max))?;
            }
        }
    }
    Ok(())
}
