//! Subcommand implementations. Every command echoes its resolved
//! configuration into its output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use urbdense_core::composite::{
    compute_band_scales, filter_observations, read_stack, rolling_median_composite, standardize, write_stack, BandScales,
};
use urbdense_core::eval::{
    area_trends, confusion_matrix, evaluate_growth, mcnemar_test, paired_counts, regions_from_ids, summary_metrics,
    AnnualMaps, PopulationTable,
};
use urbdense_core::glcm_rf::{predict_texture_map, train_texture_forest, FeatureConfig, ForestParams, TextureForest};
use urbdense_core::labeler::{derive_growth_labels, label_grids, DensityLabelGrid, Dimension};
use urbdense_core::raster::{read_raster, write_raster, MultiBandRaster};
use urbdense_core::sampler::{
    balance_classes, extract_patches, sites_from_labels, split_train_validation, thin_by_distance, PatchDataset,
    SampleSite,
};
use urbdense_core::synthcity::{generate_city_timeline, render_stack};
use urbdense_core::timeseries::smooth_probability_rasters;
use urbdense_segnet::gradcheck::{architecture_check, layer_suite};
use urbdense_segnet::{predict_map, train_model, Architecture, ModelConfig, ModelParams};

use crate::{CliError, CliResult, Command, Rows, RunConfig};

pub fn run(command: &Command, config: &RunConfig) -> CliResult<()> {
    let name = command.name();
    match command {
        Command::Synth { out } => synth(config, out).and(config.echo(name, out)),
        Command::Composite { stack, year, out } => composite(config, stack, *year, out).and(echo_beside(config, name, out)),
        Command::Scales { composite, year, out } => scales(config, composite, *year, out).and(echo_beside(config, name, out)),
        Command::Standardize { composite, scales, out } => {
            standardize_cmd(composite, scales, out).and(echo_beside(config, name, out))
        }
        Command::Label { grids, year, out } => label(config, grids, *year, out).and(config.echo(name, out)),
        Command::Sample {
            composite,
            labels,
            rows,
            out,
        } => sample(config, composite, labels, *rows, out).and(config.echo(name, out)),
        Command::Train { arch, data, out } => train(config, arch, data, out).and(config.echo(name, out)),
        Command::Predict {
            model,
            composite,
            year,
            rows,
            out,
        } => predict(config, model, composite, *year, *rows, out).and(config.echo(name, out)),
        Command::Smooth {
            probabilities,
            years,
            out,
        } => smooth(config, probabilities, years, out).and(config.echo(name, out)),
        Command::Evaluate {
            predicted,
            reference,
            rows,
            out,
        } => evaluate(predicted, reference, *rows, out).and(echo_beside(config, name, out)),
        Command::Mcnemar {
            a,
            b,
            reference,
            rows,
            class,
            out,
        } => mcnemar(a, b, reference, *rows, class.as_deref(), out).and(echo_beside(config, name, out)),
        Command::Growth {
            earlier,
            later,
            reference_earlier,
            reference_later,
            out,
        } => growth(earlier, later, reference_earlier, reference_later, out).and(echo_beside(config, name, out)),
        Command::Trends {
            horizontal,
            vertical,
            regions,
            names,
            population,
            out,
        } => trends(horizontal, vertical, regions, names.as_deref(), population.as_deref(), out)
            .and(echo_beside(config, name, out)),
        Command::Gradcheck { arch, out } => {
            if let Some(out) = out {
                config.echo(name, out)?;
            }
            gradcheck(config, arch, out.as_deref())
        }
        Command::Render { labels, scale, out } => render(labels, *scale, out).and(echo_beside(config, name, out)),
    }
}

fn echo_beside(config: &RunConfig, command: &str, file: &Path) -> CliResult<()> {
    let dir = file.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    config.echo(command, dir)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn create_parent(file: &Path) -> CliResult<()> {
    match file.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => create_dir(dir),
        None => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn crop_rows(raster: &MultiBandRaster, rows: Option<Rows>) -> CliResult<MultiBandRaster> {
    match rows {
        None => Ok(raster.clone()),
        Some(r) => {
            if r.end > raster.height() {
                return Err(CliError::Usage(format!(
                    "rows {}:{} exceed a raster of {} rows",
                    r.start,
                    r.end,
                    raster.height()
                )));
            }
            Ok(raster.crop(r.start, 0, r.end - r.start, raster.width())?)
        }
    }
}

fn read_labels(path: &Path, rows: Option<Rows>) -> CliResult<DensityLabelGrid> {
    let grid = DensityLabelGrid::read(path)?;
    match rows {
        None => Ok(grid),
        Some(_) => Ok(DensityLabelGrid::from_raster(&crop_rows(&grid.to_raster(), rows)?)?),
    }
}

fn synth(config: &RunConfig, out: &Path) -> CliResult<()> {
    let first: i32 = config.get("synth.first_year")?;
    let last: i32 = config.get("synth.last_year")?;
    if last < first {
        return Err(CliError::Usage(format!("synth.last_year {last} precedes synth.first_year {first}")));
    }
    let years: Vec<i32> = (first..=last).collect();
    let mut scenario = generate_city_timeline(config.get("seed")?, &years, config.get("synth.size")?)?;
    let drift: f64 = config.get("synth.drift_amplitude")?;
    if drift > 0.0 {
        scenario.apply_random_drift(drift, config.get("synth.reference_year")?)?;
    }
    let stack = render_stack(&scenario, &years, config.get("synth.noise_std")?, config.get("synth.qa_dropout")?)?;
    scenario.write(out.join("scenario"))?;
    write_stack(&stack, out.join("stack"))?;
    log::info!("synthetic city of {} years written to {}", years.len(), out.display());
    Ok(())
}

fn composite(config: &RunConfig, stack: &Path, year: i32, out: &Path) -> CliResult<()> {
    let stack = filter_observations(&read_stack(stack)?, config.season()?);
    let composite = rolling_median_composite(&stack, year, config.get("composite.window")?)?;
    create_parent(out)?;
    Ok(write_raster(&composite, out)?)
}

fn scales(config: &RunConfig, composite: &Path, year: i32, out: &Path) -> CliResult<()> {
    let scales = compute_band_scales(&read_raster(composite)?, config.get("composite.percentile")?, year)?;
    create_parent(out)?;
    Ok(scales.write(out)?)
}

fn standardize_cmd(composite: &Path, scales: &Path, out: &Path) -> CliResult<()> {
    let standardized = standardize(&read_raster(composite)?, &BandScales::read(scales)?)?;
    create_parent(out)?;
    Ok(write_raster(&standardized, out)?)
}

fn label(config: &RunConfig, grids: &Path, year: i32, out: &Path) -> CliResult<()> {
    let grids = read_raster(grids)?;
    let band = |name: &str| -> CliResult<MultiBandRaster> {
        let b = grids
            .band_index(name)
            .ok_or_else(|| CliError::Data(format!("grid raster lacks a {name:?} band")))?;
        Ok(MultiBandRaster::with_geometry_of(&grids, vec![name.into()], grids.band(b).to_vec())?)
    };
    let (horizontal, vertical) = label_grids(&band("bar")?, &band("height")?, &config.scheme()?, year)?;
    create_dir(out)?;
    horizontal.write(out.join("horizontal.dmr"))?;
    vertical.write(out.join("vertical.dmr"))?;
    Ok(())
}

fn sites_csv(sites: &[SampleSite]) -> String {
    let mut s = String::from("row,col,label,epoch\n");
    for site in sites {
        writeln!(s, "{},{},{},{}", site.row, site.col, site.label, site.epoch).unwrap();
    }
    s
}

fn parse_sites(text: &str) -> CliResult<Vec<SampleSite>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || CliError::Data(format!("sites.csv line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(SampleSite {
                row: f[0].parse().map_err(|_| bad())?,
                col: f[1].parse().map_err(|_| bad())?,
                label: f[2].parse().map_err(|_| bad())?,
                epoch: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Writes `train/`, `validation/`, `sites.csv` and the sampled crop as
/// `composite.dmr` and `labels.dmr`; site rows are relative to the crop.
fn sample(config: &RunConfig, composite: &Path, labels: &Path, rows: Option<Rows>, out: &Path) -> CliResult<()> {
    let composite = crop_rows(&read_raster(composite)?, rows)?;
    let labels = read_labels(labels, rows)?;
    let seed: u64 = config.get("seed")?;
    let sites = sites_from_labels(&labels, None);
    let sites = thin_by_distance(&sites, config.get("sample.min_distance")?, composite.cell_size(), seed);
    let sites = balance_classes(&sites, config.get("sample.cap_ratio")?, seed)?;
    let patches = extract_patches(
        &composite,
        &labels,
        &sites,
        config.get("sample.patch_size")?,
        config.get("sample.patch_step")?,
    )?;
    let (train, validation) = split_train_validation(&patches, config.get("sample.validation_fraction")?, seed)?;
    create_dir(out)?;
    train.write(out.join("train"), &composite)?;
    validation.write(out.join("validation"), &composite)?;
    write_text(&out.join("sites.csv"), &sites_csv(&sites))?;
    write_raster(&composite, out.join("composite.dmr"))?;
    labels.write(out.join("labels.dmr"))?;
    log::info!(
        "{} sites, {} training and {} validation patches",
        sites.len(),
        train.len(),
        validation.len()
    );
    Ok(())
}

/// Network configuration for a dataset: `train.*` and `seed`, then `model.*`.
pub fn network_config(config: &RunConfig, architecture: Architecture, data: &PatchDataset) -> CliResult<ModelConfig> {
    let mut c = ModelConfig::new(architecture, data.dimension.n_classes());
    c.in_bands = data.bands;
    c.patch_size = data.patch_size;
    c.epochs = config.get("train.epochs")?;
    c.learning_rate = config.get("train.learning_rate")?;
    c.batch_size = config.get("train.batch_size")?;
    c.seed = config.get("seed")?;
    for (k, v) in config.model_overrides() {
        c.set(k, v)?;
    }
    c.validate()?;
    Ok(c)
}

fn forest_params(config: &RunConfig) -> CliResult<(FeatureConfig, ForestParams)> {
    let features_per_split = match config.raw("rf.features_per_split") {
        "auto" => None,
        _ => Some(config.get("rf.features_per_split")?),
    };
    Ok((
        FeatureConfig {
            window: config.get("rf.glcm_window")?,
            glcm_levels: config.get("rf.glcm_levels")?,
        },
        ForestParams {
            n_trees: config.get("rf.n_trees")?,
            features_per_split,
            seed: config.get("seed")?,
        },
    ))
}

/// Model directories carry `model.txt` with `kind` and `dimension`.
fn write_model_info(out: &Path, kind: &str, dimension: Dimension) -> CliResult<()> {
    write_text(&out.join("model.txt"), &format!("kind={kind}\ndimension={dimension}\n"))
}

fn read_model_info(dir: &Path) -> CliResult<(String, Dimension)> {
    let text = read_text(&dir.join("model.txt"))?;
    let mut kind = None;
    let mut dimension = None;
    for line in text.lines() {
        match line.split_once('=') {
            Some(("kind", v)) => kind = Some(v.trim().to_owned()),
            Some(("dimension", v)) => dimension = Some(Dimension::parse(v)?),
            _ => {}
        }
    }
    match (kind, dimension) {
        (Some(k), Some(d)) => Ok((k, d)),
        _ => Err(CliError::Data(format!("{} lacks kind or dimension", dir.join("model.txt").display()))),
    }
}

fn train(config: &RunConfig, arch: &str, data: &Path, out: &Path) -> CliResult<()> {
    if arch.trim().eq_ignore_ascii_case("rf") {
        let composite = read_raster(data.join("composite.dmr"))?;
        let labels = DensityLabelGrid::read(data.join("labels.dmr"))?;
        let sites = parse_sites(&read_text(&data.join("sites.csv"))?)?;
        let (features, params) = forest_params(config)?;
        let forest = train_texture_forest(&composite, &sites, labels.dimension, features, &params)?;
        create_dir(out)?;
        forest.write(out.join("forest.txt"))?;
        return write_model_info(out, "forest", labels.dimension);
    }
    let architecture = Architecture::parse(arch).map_err(|e| CliError::Usage(e.to_string()))?;
    let train = PatchDataset::read(data.join("train"))?;
    let validation = PatchDataset::read(data.join("validation"))?;
    let model_config = network_config(config, architecture, &train)?;
    let (params, log) = train_model(&model_config, &train, &validation)?;
    create_dir(out)?;
    params.write(&model_config, out)?;
    write_text(&out.join("training_log.csv"), &log.to_csv())?;
    write_model_info(out, "network", train.dimension)
}

fn predict(config: &RunConfig, model: &Path, composite: &Path, year: i32, rows: Option<Rows>, out: &Path) -> CliResult<()> {
    let composite = crop_rows(&read_raster(composite)?, rows)?;
    let (kind, dimension) = read_model_info(model)?;
    let (labels, probabilities) = match kind.as_str() {
        "forest" => predict_texture_map(&TextureForest::read(model.join("forest.txt"))?, &composite, year)?,
        "network" => {
            let (model_config, params) = ModelParams::read(model)?;
            predict_map(&model_config, &params, &composite, dimension, year, config.get("predict.step")?)?
        }
        other => return Err(CliError::Data(format!("unknown model kind {other:?}"))),
    };
    create_dir(out)?;
    labels.write(out.join("labels.dmr"))?;
    write_raster(&probabilities, out.join("probabilities.dmr"))?;
    Ok(())
}

fn dimension_of_probabilities(raster: &MultiBandRaster) -> CliResult<Dimension> {
    [Dimension::Horizontal, Dimension::Vertical]
        .into_iter()
        .find(|d| d.n_classes() == raster.bands())
        .ok_or_else(|| CliError::Data(format!("{} probability bands match no label dimension", raster.bands())))
}

fn smooth(config: &RunConfig, probabilities: &[PathBuf], years: &[i32], out: &Path) -> CliResult<()> {
    if probabilities.len() != years.len() {
        return Err(CliError::Usage(format!(
            "{} probability rasters for {} years",
            probabilities.len(),
            years.len()
        )));
    }
    let rasters = probabilities.iter().map(read_raster).collect::<Result<Vec<_>, _>>()?;
    let dimension = dimension_of_probabilities(&rasters[0])?;
    let grids = smooth_probability_rasters(
        dimension,
        years,
        &rasters,
        config.get("smooth.window")?,
        config.get("smooth.polyorder")?,
    )?;
    create_dir(out)?;
    for grid in grids {
        grid.write(out.join(format!("labels_{}.dmr", grid.epoch)))?;
    }
    Ok(())
}

fn check_same_geometry(a: &DensityLabelGrid, b: &DensityLabelGrid, what: &str) -> CliResult<()> {
    if !a.same_geometry(b) {
        return Err(CliError::Data(format!(
            "{what}: {}x{} grid vs {}x{} reference",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.dimension != b.dimension {
        return Err(CliError::Data(format!("{what}: {} map vs {} reference", a.dimension, b.dimension)));
    }
    Ok(())
}

fn evaluate(predicted: &Path, reference: &Path, rows: Option<Rows>, out: &Path) -> CliResult<()> {
    let predicted = DensityLabelGrid::read(predicted)?;
    let reference = read_labels(reference, rows)?;
    check_same_geometry(&predicted, &reference, "evaluate")?;
    let matrix = confusion_matrix(&predicted.labels, &reference.labels, reference.dimension.class_names())?;
    let report = summary_metrics(&matrix)?;
    write_text(out, &report.to_csv())?;
    write_text(&out.with_extension("confusion.csv"), &matrix.to_csv())?;
    print!("{}", report.to_text());
    Ok(())
}

fn mcnemar(a: &Path, b: &Path, reference: &Path, rows: Option<Rows>, class: Option<&str>, out: &Path) -> CliResult<()> {
    let (a, b) = (DensityLabelGrid::read(a)?, DensityLabelGrid::read(b)?);
    let reference = read_labels(reference, rows)?;
    check_same_geometry(&a, &reference, "mcnemar map a")?;
    check_same_geometry(&b, &reference, "mcnemar map b")?;
    let class = match class {
        None => None,
        Some(name) => Some(
            reference
                .dimension
                .class_names()
                .iter()
                .position(|c| *c == name)
                .ok_or_else(|| CliError::Usage(format!("no {} class {name:?}", reference.dimension)))? as u8,
        ),
    };
    let counts = paired_counts(&a.labels, &b.labels, &reference.labels, class)?;
    let result = mcnemar_test(&counts)?;
    let mut s = String::from("statistic,value\n");
    writeln!(s, "both_correct,{}", counts.both_correct).unwrap();
    writeln!(s, "only_a,{}", counts.only_a).unwrap();
    writeln!(s, "only_b,{}", counts.only_b).unwrap();
    writeln!(s, "both_wrong,{}", counts.both_wrong).unwrap();
    writeln!(s, "chi2_corrected,{}", result.chi2_corrected).unwrap();
    writeln!(s, "p_corrected,{}", result.p_corrected).unwrap();
    writeln!(s, "chi2,{}", result.chi2).unwrap();
    writeln!(s, "p,{}", result.p).unwrap();
    write_text(out, &s)?;
    print!("{s}");
    Ok(())
}

fn growth(earlier: &Path, later: &Path, reference_earlier: &Path, reference_later: &Path, out: &Path) -> CliResult<()> {
    let predicted = derive_growth_labels(&DensityLabelGrid::read(earlier)?, &DensityLabelGrid::read(later)?)?;
    let reference = derive_growth_labels(
        &DensityLabelGrid::read(reference_earlier)?,
        &DensityLabelGrid::read(reference_later)?,
    )?;
    let g = evaluate_growth(&predicted, &reference)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("statistic,value\n");
    writeln!(s, "true_positive,{}", g.true_positive).unwrap();
    writeln!(s, "false_positive,{}", g.false_positive).unwrap();
    writeln!(s, "false_negative,{}", g.false_negative).unwrap();
    writeln!(s, "users,{}", opt(g.users)).unwrap();
    writeln!(s, "producers,{}", g.producers).unwrap();
    writeln!(s, "f1,{}", opt(g.f1)).unwrap();
    write_text(out, &s)?;
    print!("{s}");
    Ok(())
}

fn read_region_names(path: &Path) -> CliResult<BTreeMap<i64, String>> {
    let mut names = BTreeMap::new();
    for (i, line) in read_text(path)?.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || CliError::Data(format!("{} line {}: {line:?}", path.display(), i + 1));
        let (id, name) = line.split_once(',').ok_or_else(bad)?;
        if names.insert(id.trim().parse().map_err(|_| bad())?, name.trim().to_owned()).is_some() {
            return Err(bad());
        }
    }
    Ok(names)
}

fn trends(
    horizontal: &[PathBuf],
    vertical: &[PathBuf],
    regions: &Path,
    names: Option<&Path>,
    population: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    let read_all = |paths: &[PathBuf]| -> CliResult<BTreeMap<i32, DensityLabelGrid>> {
        let mut by_year = BTreeMap::new();
        for p in paths {
            let g = DensityLabelGrid::read(p)?;
            if by_year.insert(g.epoch, g).is_some() {
                return Err(CliError::Data(format!("two maps of the same year among {}", p.display())));
            }
        }
        Ok(by_year)
    };
    let (h, v) = (read_all(horizontal)?, read_all(vertical)?);
    if h.keys().ne(v.keys()) {
        return Err(CliError::Data("horizontal and vertical maps cover different years".into()));
    }
    let maps: Vec<AnnualMaps<'_>> = h
        .iter()
        .map(|(year, hg)| AnnualMaps {
            year: *year,
            horizontal: hg,
            vertical: &v[year],
        })
        .collect();
    let ids = read_raster(regions)?;
    let names = match names {
        Some(p) => read_region_names(p)?,
        None => BTreeMap::new(),
    };
    let regions = regions_from_ids(ids.band(0), &names)?;
    let population = population.map(PopulationTable::read_csv).transpose()?;
    let report = area_trends(&maps, &regions, population.as_ref())?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_text(out, &report.to_csv())
}

fn gradcheck(config: &RunConfig, arch: &str, out: Option<&Path>) -> CliResult<()> {
    let tolerance: f64 = config.get("gradcheck.tolerance")?;
    let seed: u64 = config.get("seed")?;
    let report = match arch.trim().to_ascii_lowercase().as_str() {
        "layers" => layer_suite(tolerance, seed)?,
        "all" => urbdense_segnet::full_suite(tolerance, seed)?,
        other => {
            let architecture = Architecture::parse(other).map_err(|e| CliError::Usage(e.to_string()))?;
            architecture_check(architecture, tolerance, seed)?
        }
    };
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = out {
        write_text(&dir.join("gradcheck.txt"), &text)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Data("gradient check failed".into()))
    }
}

/// Colors by class code; unlabeled cells are black.
pub fn class_color(dimension: Dimension, label: Option<u8>) -> [u8; 3] {
    const HORIZONTAL: [[u8; 3]; 4] = [[235, 235, 235], [255, 237, 160], [254, 153, 41], [189, 0, 38]];
    const VERTICAL: [[u8; 3]; 3] = [[235, 235, 235], [158, 202, 225], [8, 81, 156]];
    let table: &[[u8; 3]] = match dimension {
        Dimension::Horizontal => &HORIZONTAL,
        Dimension::Vertical => &VERTICAL,
    };
    label.and_then(|l| table.get(usize::from(l)).copied()).unwrap_or([0, 0, 0])
}

fn render(labels: &Path, scale: usize, out: &Path) -> CliResult<()> {
    if scale == 0 {
        return Err(CliError::Usage("scale must be positive".into()));
    }
    let grid = DensityLabelGrid::read(labels)?;
    let (w, h) = (grid.width * scale, grid.height * scale);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for row in 0..h {
        for col in 0..w {
            bytes.extend_from_slice(&class_color(grid.dimension, grid.get(row / scale, col / scale)));
        }
    }
    create_parent(out)?;
    fs::write(out, bytes).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))
}
