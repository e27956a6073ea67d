//! Subcommand implementations. Every CSV starts with a provenance comment
//! line followed by a header row.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use tnnsim_core::array::{convergence_sweep, write_sweep_csv, ReadConfig};
use tnnsim_core::data::{load_cifar10, load_mnist, Dataset, ImageSet};
use tnnsim_core::faults::{array_backed_eval, ber_sweep, drop_ber, write_sweep_runs_csv, write_sweep_summary_csv, ErrorType};
use tnnsim_core::pcsa::{
    calibrate, count_slower_than, log_grid, switching_time_map, write_map_csv, PcsaParams, VDD_NEAR_THRESHOLD, VDD_NOMINAL,
};
use tnnsim_core::rng::derive_seed;
use tnnsim_core::tnn::{accuracy, load_model, save_model, CompiledModel, NetworkModel};
use tnnsim_train::checkpoint::save_checkpoint;
use tnnsim_train::train::write_metrics_csv;

use crate::config::ExperimentConfig;
use crate::{Command, ConfigError, GlobalArgs};

/// Accuracy drop (fraction) reported by `inject-sweep`.
const REPORTED_DROP: f64 = 0.05;

pub fn run(global: &GlobalArgs, command: &Command, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let out = Output::new(&global.out_dir, cfg, global.seed, command.name())?;
    match command {
        Command::Calibrate => cmd_calibrate(cfg, &out),
        Command::Map { .. } => cmd_map(cfg, &out),
        Command::SenseSweep { .. } => cmd_sense_sweep(cfg, &out, global.seed),
        Command::Train { .. } => cmd_train(cfg, &out),
        Command::Eval { model } => cmd_eval(cfg, &out, model),
        Command::InjectSweep { model, .. } => cmd_inject_sweep(cfg, &out, model, global.seed),
        Command::ArrayEval { model, .. } => cmd_array_eval(cfg, &out, model, global.seed),
    }
}

struct Output {
    dir: PathBuf,
    provenance: String,
}

impl Output {
    fn new(dir: &Path, cfg: &ExperimentConfig, seed: u64, command: &str) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let provenance = format!(
            "# tnnsim {} command={command} seed={seed} config_hash={}\n",
            env!("CARGO_PKG_VERSION"),
            cfg.hash()
        );
        Ok(Self { dir: dir.to_path_buf(), provenance })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes provenance line plus `body` to `name`.
    fn text(&self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> anyhow::Result<PathBuf> {
        let mut buf = self.provenance.clone().into_bytes();
        body(&mut buf)?;
        let path = self.path(name);
        fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(path)
    }
}

fn vdd_tag(vdd: f64) -> String {
    format!("{vdd}V")
}

fn cmd_calibrate(cfg: &ExperimentConfig, out: &Output) -> anyhow::Result<()> {
    let vdd = cfg.pcsa.vdd;
    let anchors = cfg.anchors();
    let tag = vdd_tag(vdd);
    let anchor_vdd = anchors.first().map_or(VDD_NEAR_THRESHOLD, |a| a.vdd);
    let derivable = (anchor_vdd - VDD_NEAR_THRESHOLD).abs() < 1e-9 && (vdd - VDD_NOMINAL).abs() < 1e-9;
    if (vdd - anchor_vdd).abs() >= 1e-9 && !derivable {
        return Err(ConfigError(format!("anchors at {anchor_vdd} V cannot produce parameters for {vdd} V")).into());
    }
    let initial = cfg.pcsa_params(anchor_vdd)?;
    let cal = match calibrate(&anchors, cfg.free_params()?, &initial) {
        Ok(c) => c,
        Err(tnnsim_core::Error::Calibration { worst, report }) => {
            out.text(&format!("calibration_{tag}.csv"), |w| w.write_all(report.as_bytes()))?;
            bail!("calibration failed: worst relative error {worst:.3}\n{report}");
        }
        Err(e) => return Err(e.into()),
    };
    out.text(&format!("calibration_{tag}.csv"), |w| w.write_all(cal.report().as_bytes()))?;
    print!("{}", cal.report());

    let params = if derivable { PcsaParams::nominal_from(&cal.params) } else { cal.params };
    let toml = toml::to_string(&params).context("serializing parameters")?;
    out.text(&format!("pcsa_{tag}.toml"), |w| w.write_all(toml.as_bytes()))?;
    Ok(())
}

fn cmd_map(cfg: &ExperimentConfig, out: &Output) -> anyhow::Result<()> {
    let a = &cfg.array;
    let grid = log_grid(a.map_r_min, a.map_r_max, a.map_points);
    let threshold = a.map_slow_ns * 1e-9;
    let mut summary = Vec::new();
    for vdd in [VDD_NEAR_THRESHOLD, VDD_NOMINAL] {
        let params = cfg.pcsa_params(vdd)?;
        let map = switching_time_map(&grid, &params)?;
        out.text(&format!("map_{}.csv", vdd_tag(vdd)), |w| write_map_csv(w, &grid, &map))?;
        summary.push((vdd, count_slower_than(&map, threshold)));
    }
    out.text("map_summary.csv", |w| {
        writeln!(w, "vdd_v,threshold_ns,grid_points,slow_cells")?;
        for (vdd, n) in &summary {
            writeln!(w, "{vdd},{},{},{n}", a.map_slow_ns, grid.len() * grid.len())?;
        }
        Ok(())
    })?;
    for (vdd, n) in &summary {
        println!("{vdd} V: {n} cells slower than {} ns", a.map_slow_ns);
    }
    Ok(())
}

fn cmd_sense_sweep(cfg: &ExperimentConfig, out: &Output, seed: u64) -> anyhow::Result<()> {
    let a = &cfg.array;
    let params = cfg.pcsa_params(cfg.pcsa.vdd)?;
    let r_bl = log_grid(a.sweep_r_bl_min, a.sweep_r_bl_max, a.sweep_points);
    let probs = convergence_sweep(a.sweep_r_blb, &r_bl, a.sweep_window_ns * 1e-9, a.sweep_trials, &params, seed)?;
    out.text(&format!("sense_sweep_{}.csv", vdd_tag(cfg.pcsa.vdd)), |w| write_sweep_csv(w, &r_bl, &probs))?;
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    let dir = cfg.data_dir();
    let mut data = match cfg.data.dataset.as_str() {
        "cifar10" => load_cifar10(&dir),
        _ => load_mnist(&dir),
    }
    .with_context(|| {
        format!(
            "loading {} from {} (see scripts/fetch-mnist.sh, or set data.dir or {})",
            cfg.data.dataset,
            dir.display(),
            tnnsim_core::data::MNIST_DIR_ENV
        )
    })?;
    if let Some(n) = cfg.data.test_limit {
        data.test = data.test.head(n);
    }
    Ok(data)
}

fn load_test_set(cfg: &ExperimentConfig) -> anyhow::Result<ImageSet> {
    Ok(load_dataset(cfg)?.test)
}

fn read_model(path: &Path) -> anyhow::Result<NetworkModel> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn cmd_train(cfg: &ExperimentConfig, out: &Output) -> anyhow::Result<()> {
    let data = load_dataset(cfg)?;
    let outcome = tnnsim_train::train(&cfg.train, &data, |m| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  test accuracy {:.4}  lr {:.3e}",
            m.epoch, m.train_loss, m.test_accuracy, m.lr
        );
    })?;
    out.text("metrics.csv", |w| write_metrics_csv(w, &outcome.metrics))?;
    let model_path = out.path("model.tnn");
    save_model(&outcome.best_model, &model_path)?;
    println!("wrote {}", model_path.display());
    let ckpt = out.path("checkpoint.tns");
    save_checkpoint(&ckpt, &outcome.shadow, &outcome.optimizer)?;
    println!("wrote {}", ckpt.display());
    println!("max test accuracy {:.4} at epoch {}", outcome.max_accuracy, outcome.best_epoch);
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, out: &Output, model: &Path) -> anyhow::Result<()> {
    let net = read_model(model)?;
    let test = load_test_set(cfg)?;
    let acc = accuracy(&CompiledModel::new(&net)?, &test.images(), test.labels())?;
    out.text("eval.csv", |w| {
        writeln!(w, "images,accuracy")?;
        writeln!(w, "{},{acc}", test.len())
    })?;
    println!("test accuracy {acc:.4} on {} images", test.len());
    Ok(())
}

fn cmd_inject_sweep(cfg: &ExperimentConfig, out: &Output, model: &Path, seed: u64) -> anyhow::Result<()> {
    let net = read_model(model)?;
    let test = load_test_set(cfg)?;
    let clean = accuracy(&CompiledModel::new(&net)?, &test.images(), test.labels())?;
    let rates = cfg.ber_rates();
    let mut drops = Vec::new();
    for &t in &cfg.faults.error_types {
        let error_type = ErrorType::from_number(t)?;
        if error_type == ErrorType::ZeroConfusion && net.is_binary() {
            eprintln!("skipping type 2 errors: binarized model has no zero weights");
            continue;
        }
        let points = ber_sweep(&net, &test, &rates, error_type, cfg.faults.runs, derive_seed(seed, &[t as u64]))?;
        out.text(&format!("inject_type{t}_runs.csv"), |w| write_sweep_runs_csv(w, error_type, &points))?;
        out.text(&format!("inject_type{t}_summary.csv"), |w| write_sweep_summary_csv(w, error_type, &points))?;
        drops.push((t, drop_ber(&points, clean, REPORTED_DROP)));
    }
    out.text("inject_drop.csv", |w| {
        writeln!(w, "error_type,clean_accuracy,drop,ber_at_drop")?;
        for (t, ber) in &drops {
            let ber = ber.map_or_else(|| "NA".to_string(), |b| b.to_string());
            writeln!(w, "{t},{clean},{REPORTED_DROP},{ber}")?;
        }
        Ok(())
    })?;
    Ok(())
}

fn cmd_array_eval(cfg: &ExperimentConfig, out: &Output, model: &Path, seed: u64) -> anyhow::Result<()> {
    let net = read_model(model)?;
    let test = load_test_set(cfg)?;
    let clean = accuracy(&CompiledModel::new(&net)?, &test.images(), test.labels())?;
    let read = ReadConfig {
        window: cfg.array.read_window_ns * 1e-9,
        pcsa: cfg.pcsa_params(cfg.pcsa.vdd)?,
        freeze: cfg.array.freeze,
    };
    let mut rows = Vec::new();
    for run in 0..cfg.array.runs as u64 {
        let chip_seed = if cfg.array.reprogram { derive_seed(seed, &[run]) } else { seed };
        rows.push(array_backed_eval(&net, &cfg.device, &read, &test, chip_seed, run)?);
    }
    out.text(&format!("array_eval_{}.csv", vdd_tag(cfg.pcsa.vdd)), |w| {
        writeln!(w, "run,clean_accuracy,accuracy,weights,type1_count,type2_count,type1_rate,type2_rate")?;
        for (r, e) in rows.iter().enumerate() {
            let s = &e.errors;
            writeln!(
                w,
                "{r},{clean},{},{},{},{},{},{}",
                e.accuracy, s.total, s.type1_count, s.type2_count, s.type1_rate, s.type2_rate
            )?;
        }
        Ok(())
    })?;
    Ok(())
}
