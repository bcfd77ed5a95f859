use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use dissect_core::dataset::{
    extract_patches, generate_synthetic_case, load_index_cases, mask_to_gray_image, split_dataset, to_gray_image,
    write_index, Case, CaseRecord, ImageLabel, Patch, PatchConfig, Split, SplitAssignment,
};
use dissect_core::dissect::{
    encode_png, probe, rank_units, render_montage, select_survey_units, spatial_layer_shape, CatalogCase,
    CatalogFile, CatalogPatch, CatalogTopEntry, CatalogUnit, ProbeConfig, ThresholdSource, CATALOG_FILE,
    CATALOG_FORMAT_VERSION, CONTEXT_DIR, MONTAGE_DIR,
};
use dissect_core::model::{load_model_files, save_model_files};
use dissect_core::trainer::{build_dissectnet_t, train as run_training, TrainConfig};
use dissect_survey::lexicon::Lexicon;
use dissect_survey::report::{build_report, render_table};
use dissect_survey::server::{load_catalog, SurveyService};
use dissect_survey::store::{load_annotation_log, AnnotationLog};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{CliError, DissectArgs, GenDataArgs, ReportArgs, ServeArgs, SplitChoice, ThresholdChoice, TrainArgs};

/// Survey size when `--survey-n` is not given (capped by the unit count).
const DEFAULT_SURVEY_N: usize = 45;

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| failed(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| invalid(format!("cannot create {}: {e}", path.display())))
}

fn png_bytes(img: &dissect_core::GrayImage) -> Result<Vec<u8>, CliError> {
    encode_png(img).map_err(failed)
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if a.cases == 0 {
        return Err(invalid("--cases must be at least 1"));
    }
    if !(0.0..=1.0).contains(&a.positive_frac) {
        return Err(invalid(format!("--positive-frac must be in [0, 1], got {}", a.positive_frac)));
    }
    create_dir(&a.out.join("images"))?;
    create_dir(&a.out.join("masks"))?;

    let n_pos = (a.cases as f64 * a.positive_frac).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut positive: Vec<bool> = (0..a.cases).map(|i| i < n_pos).collect();
    positive.shuffle(&mut rng);

    let mut records = Vec::with_capacity(a.cases);
    for (i, &pos) in positive.iter().enumerate() {
        let mut case = generate_synthetic_case(rng.next_u64(), pos);
        case.case_id = format!("case{i:04}");
        case.patient_id = format!("patient{i:04}");
        let image_rel = format!("images/{}.png", case.case_id);
        let mask_rel = format!("masks/{}.png", case.case_id);
        write_file(&a.out.join(&image_rel), &png_bytes(&to_gray_image(&case.image))?)?;
        write_file(&a.out.join(&mask_rel), &png_bytes(&mask_to_gray_image(&case.lesion_mask))?)?;
        records.push(CaseRecord {
            case_id: case.case_id,
            patient_id: case.patient_id,
            image_path: image_rel,
            mask_path: mask_rel,
            image_label: if pos { ImageLabel::Cancerous } else { ImageLabel::Normal },
        });
    }
    let index = a.out.join("index.jsonl");
    write_index(&index, &records).map_err(failed)?;
    println!(
        "wrote {} cases ({n_pos} positive) to {} (seed {})",
        a.cases,
        index.display(),
        a.seed
    );
    Ok(())
}

/// Contents of `<model>.split.json`.
#[derive(Debug, Serialize, Deserialize)]
struct SplitFile {
    seed: u64,
    split_seed: u64,
    assignment: SplitAssignment,
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.extension().is_some_and(|e| e == "netm") {
        p.to_path_buf()
    } else {
        let mut s = p.as_os_str().to_owned();
        s.push(".netm");
        PathBuf::from(s)
    }
}

fn sibling(manifest: &Path, ext: &str) -> PathBuf {
    manifest.with_extension(ext)
}

fn patches_for<'a>(cases: impl Iterator<Item = &'a Case>, cfg: &PatchConfig) -> Result<Vec<Patch>, CliError> {
    let mut out = Vec::new();
    for c in cases {
        out.extend(extract_patches(c, cfg).map_err(invalid)?);
    }
    Ok(out)
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let split_seed = rng.next_u64();
    let init_seed = rng.next_u64();
    let cfg = TrainConfig {
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: rng.next_u64(),
    };
    cfg.validate().map_err(invalid)?;
    let mut model = build_dissectnet_t(init_seed);
    let patch_cfg = PatchConfig {
        window_frac: a.window_frac,
        stride_frac: a.stride_frac,
        input_size: model.input_shape()[1],
    };
    patch_cfg.validate().map_err(invalid)?;
    let manifest = manifest_path(&a.out_model);
    if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }

    let cases = load_index_cases(&a.index).map_err(invalid)?;
    let assignment = split_dataset(cases.iter().map(|c| c.patient_id.as_str()), split_seed).map_err(invalid)?;
    let in_split = |s: Split| {
        let assignment = &assignment;
        cases
            .iter()
            .filter(move |c| assignment.split_of(&c.patient_id) == Some(s))
    };
    let train_patches = patches_for(in_split(Split::Train), &patch_cfg)?;
    let val_patches = patches_for(in_split(Split::Val), &patch_cfg)?;
    println!(
        "seed {}: {} train patches ({} positive), {} validation patches ({} positive)",
        a.seed,
        train_patches.len(),
        train_patches.iter().filter(|p| p.label).count(),
        val_patches.len(),
        val_patches.iter().filter(|p| p.label).count()
    );

    let metrics_path = sibling(&manifest, "metrics.jsonl");
    let mut metrics =
        File::create(&metrics_path).map_err(|e| invalid(format!("cannot create {}: {e}", metrics_path.display())))?;
    let mut write_err = None;
    let outcome = run_training(&mut model, &train_patches, Some(&val_patches), &cfg, |m| {
        let auc = m.val_auc.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!("epoch {:>3}  loss {:.5}  val auc {auc}", m.epoch, m.mean_loss);
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
    })
    .map_err(failed)?;
    if let Some(e) = write_err {
        return Err(failed(format!("cannot write {}: {e}", metrics_path.display())));
    }

    save_model_files(&model, &manifest).map_err(failed)?;
    let split = SplitFile {
        seed: a.seed,
        split_seed,
        assignment,
    };
    let mut split_json = serde_json::to_vec_pretty(&split).map_err(failed)?;
    split_json.push(b'\n');
    write_file(&sibling(&manifest, "split.json"), &split_json)?;

    let final_auc = match outcome.epochs.last() {
        Some(m) => m.val_auc,
        None => dissect_core::trainer::evaluate(&model, &val_patches).ok().map(|r| r.auc),
    };
    match final_auc {
        Some(auc) => println!("validation AUC: {auc:.4}"),
        None => println!("validation AUC: n/a (validation split lacks one class)"),
    }
    println!("model written to {}", manifest.display());
    Ok(())
}

pub fn dissect(a: &DissectArgs) -> Result<(), CliError> {
    let probe_cfg = ProbeConfig {
        k: a.k,
        quantile: a.quantile,
        threshold_source: match a.threshold_source {
            ThresholdChoice::MaxScores => ThresholdSource::MaxScores,
            ThresholdChoice::AllActivations => ThresholdSource::AllActivations,
        },
    };
    probe_cfg.validate().map_err(invalid)?;
    let manifest = manifest_path(&a.model);
    let model = load_model_files(&manifest).map_err(invalid)?;
    let (units, _, _) = spatial_layer_shape(&model, &a.layer).map_err(|e| match e {
        dissect_core::Error::NotSpatial { layer, kind } => invalid(format!(
            "layer `{layer}` is a {kind} layer without spatial feature maps; \
             dissection applies only to convolutional network layers"
        )),
        other => invalid(other),
    })?;
    let survey_n = a.survey_n.unwrap_or(DEFAULT_SURVEY_N.min(units));
    if survey_n == 0 || survey_n > units {
        return Err(invalid(format!(
            "--survey-n must be between 1 and the layer's {units} units, got {survey_n}"
        )));
    }
    let [_, ih, iw] = model.input_shape();
    if ih != iw {
        return Err(invalid(format!("model input {ih}x{iw} is not square")));
    }
    let patch_cfg = PatchConfig {
        window_frac: a.window_frac,
        stride_frac: a.stride_frac,
        input_size: ih,
    };
    patch_cfg.validate().map_err(invalid)?;

    let cases = load_index_cases(&a.index).map_err(invalid)?;
    let wanted: Option<Vec<Split>> = match a.split {
        SplitChoice::All => None,
        SplitChoice::Train => Some(vec![Split::Train]),
        SplitChoice::Val => Some(vec![Split::Val]),
        SplitChoice::Test => Some(vec![Split::Test]),
        SplitChoice::Heldout => Some(vec![Split::Val, Split::Test]),
    };
    let selected: Vec<&Case> = match wanted {
        None => cases.iter().collect(),
        Some(splits) => {
            let split_path = sibling(&manifest, "split.json");
            let text = std::fs::read_to_string(&split_path).map_err(|e| {
                invalid(format!(
                    "cannot read split file {} (use --split all for models without one): {e}",
                    split_path.display()
                ))
            })?;
            let split: SplitFile = serde_json::from_str(&text)
                .map_err(|e| invalid(format!("{}: {e}", split_path.display())))?;
            cases
                .iter()
                .filter(|c| {
                    split
                        .assignment
                        .split_of(&c.patient_id)
                        .is_some_and(|s| splits.contains(&s))
                })
                .collect()
        }
    };
    let patches = patches_for(selected.iter().copied(), &patch_cfg)?;
    if patches.is_empty() {
        return Err(invalid("no patches in the selected split"));
    }

    let model_id = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let mut catalog = probe(&model, &model_id, &a.layer, &patches, &probe_cfg).map_err(failed)?;
    let labels: HashMap<String, bool> = patches.iter().map(|p| (p.patch_id.clone(), p.label)).collect();
    catalog.attach_labels(&labels).map_err(failed)?;
    let ranked = rank_units(&catalog, &labels).map_err(failed)?;
    let survey = select_survey_units(&ranked, survey_n, a.seed).map_err(failed)?;

    create_dir(&a.out.join(MONTAGE_DIR))?;
    create_dir(&a.out.join(CONTEXT_DIR))?;
    let pixels: HashMap<&str, &dissect_core::Tensor> =
        patches.iter().map(|p| (p.patch_id.as_str(), &p.pixels)).collect();
    let by_id: HashMap<&str, &Patch> = patches.iter().map(|p| (p.patch_id.as_str(), p)).collect();

    let mut catalog_units = Vec::with_capacity(catalog.units.len());
    let mut used: BTreeSet<&str> = BTreeSet::new();
    for rec in &catalog.units {
        let montage_rel = format!("{MONTAGE_DIR}/{}.png", rec.unit_id());
        let img = render_montage(rec, &pixels).map_err(failed)?;
        write_file(&a.out.join(&montage_rel), &png_bytes(&img)?)?;
        for e in &rec.top_k {
            used.insert(by_id[e.patch_id.as_str()].patch_id.as_str());
        }
        catalog_units.push(CatalogUnit {
            unit_id: rec.unit_id(),
            unit_index: rec.unit_index,
            threshold: rec.threshold,
            positive_fraction: rec.positive_fraction,
            montage: montage_rel,
            top_k: rec
                .top_k
                .iter()
                .map(|e| CatalogTopEntry {
                    score: e.score,
                    patch_id: e.patch_id.clone(),
                    argmax_row: e.argmax.0,
                    argmax_col: e.argmax.1,
                })
                .collect(),
        });
    }

    let catalog_patches: Vec<CatalogPatch> = used
        .iter()
        .map(|id| {
            let p = by_id[id];
            CatalogPatch {
                patch_id: p.patch_id.clone(),
                case_id: p.source_case_id.clone(),
                rect: p.rect,
                label: p.label,
            }
        })
        .collect();
    let used_cases: BTreeSet<&str> = catalog_patches.iter().map(|p| p.case_id.as_str()).collect();
    let mut catalog_cases = Vec::with_capacity(used_cases.len());
    for case_id in used_cases {
        let case = selected
            .iter()
            .find(|c| c.case_id == case_id)
            .expect("patch source case is selected");
        let rel = format!("{CONTEXT_DIR}/{case_id}.png");
        write_file(&a.out.join(&rel), &png_bytes(&to_gray_image(&case.image))?)?;
        catalog_cases.push(CatalogCase {
            case_id: case_id.to_string(),
            width: case.width(),
            height: case.height(),
            image: rel,
        });
    }

    let file = CatalogFile {
        format_version: CATALOG_FORMAT_VERSION,
        model_id,
        layer_id: a.layer.clone(),
        k: a.k,
        quantile: a.quantile,
        threshold_source: probe_cfg.threshold_source,
        seed: a.seed,
        units: catalog_units,
        survey_units: survey.iter().map(|&u| catalog.units[u].unit_id()).collect(),
        patches: catalog_patches,
        cases: catalog_cases,
    };
    file.validate().map_err(failed)?;
    let mut json = serde_json::to_vec_pretty(&file).map_err(failed)?;
    json.push(b'\n');
    write_file(&a.out.join(CATALOG_FILE), &json)?;

    let best = &catalog.units[ranked[0]];
    println!(
        "seed {}: probed {} patches; {} units of {} -> {}",
        a.seed,
        patches.len(),
        catalog.units.len(),
        a.layer,
        a.out.display()
    );
    println!(
        "top unit {} has {:.0}% positive top-{} patches; {} units selected for the survey",
        best.unit_id(),
        100.0 * best.positive_fraction.unwrap_or(0.0),
        a.k,
        survey_n
    );
    Ok(())
}

fn load_lexicon(path: Option<&Path>) -> Result<Lexicon, CliError> {
    match path {
        None => Ok(Lexicon::builtin()),
        Some(p) if !p.is_file() => Err(invalid(format!("lexicon file {} not found", p.display()))),
        Some(p) => Lexicon::load(p).map_err(invalid),
    }
}

pub fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let lexicon = load_lexicon(a.lexicon.as_deref())?;
    let catalog = load_catalog(&a.catalog).map_err(invalid)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.catalog.join("annotations.jsonl"));
    let log = AnnotationLog::open(&log_path).map_err(failed)?;
    let svc = SurveyService::new(lexicon, log);
    svc.attach_catalog(&a.catalog, catalog);

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(failed)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| failed(format!("cannot listen on {}:{}: {e}", a.host, a.port)))?;
        let addr = listener.local_addr().map_err(failed)?;
        // A closed stdout must not take the service down with it.
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "listening on http://{addr}");
        let _ = writeln!(out, "annotation log: {}", log_path.display());
        let _ = out.flush();
        drop(out);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        dissect_survey::server::serve(listener, svc, shutdown).await.map_err(failed)
    })
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let lexicon = load_lexicon(a.lexicon.as_deref())?;
    if !a.log.is_file() {
        return Err(invalid(format!("annotation log {} not found", a.log.display())));
    }
    let loaded = load_annotation_log(&a.log).map_err(failed)?;
    let report = build_report(&loaded.annotations, &lexicon);
    print!("{}", render_table(&report));
    if let Some(out) = &a.out {
        let mut json = serde_json::to_vec_pretty(&report).map_err(failed)?;
        json.push(b'\n');
        write_file(out, &json)?;
    }
    Ok(())
}
