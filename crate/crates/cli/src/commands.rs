use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rgae_core::compressor::{plan_bins, pool_avg, pool_max, PoolMode, PoolPlan};
use rgae_core::experiments::{compare, compare_csv, gradcheck_suite, loss_csv, CompareOptions};
use rgae_core::model::task::COLORS;
use rgae_core::model::{train, Image, Mllm, SyntheticTask, TraceMode};
use rgae_core::rgae::{explain, raw_attention_baseline, CrossRule, ExplainOptions, RGaeResult};
use rgae_core::trace_io::{self, csv_string, format_g17, Record, RunConfig};
use rgae_core::viz::{render_patch_map, render_query_grid};
use rgae_core::Tensor;

use crate::run_dir::RunDir;

/// A path the user named that does not exist.
#[derive(Debug)]
pub struct MissingFile(pub PathBuf);

impl std::fmt::Display for MissingFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing file: {}", self.0.display())
    }
}

impl std::error::Error for MissingFile {}

/// Input that parses but cannot be used.
#[derive(Debug)]
pub struct InvalidInput(pub String);

impl std::fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid input: {}", self.0)
    }
}

impl std::error::Error for InvalidInput {}

/// A gradient check above tolerance.
#[derive(Debug)]
pub struct ToleranceExceeded(pub f64, pub f64);

impl std::fmt::Display for ToleranceExceeded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "max relative error {:e} exceeds tolerance {:e}", self.0, self.1)
    }
}

impl std::error::Error for ToleranceExceeded {}

pub fn require(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(MissingFile(path.to_path_buf()).into());
    }
    Ok(())
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    InvalidInput(msg.into()).into()
}

pub fn load_config(run: &mut RunDir, path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            require(p)?;
            run.add_input(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    run.set_config(&cfg.text)?;
    Ok(cfg)
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub stages: Option<u8>,
}

pub fn cmd_train(run: &mut RunDir, args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(run, args.config.as_deref())?;
    if let Some(stages) = args.stages {
        cfg.train.stages = stages;
    }
    let mut model = Mllm::new(cfg.model.clone())?;
    let history = train(&mut model, &cfg.train)?;
    run.write("loss.csv", loss_csv(&history).as_bytes())?;
    let ck = run.join("checkpoint.rgae");
    model.save(&ck)?;
    run.track(ck.clone());
    if let Some(last) = history.last() {
        println!("trained {} steps, final loss {}", last.step, format_g17(last.loss));
    }
    println!("checkpoint: {}", ck.display());
    Ok(())
}

pub struct ExplainArgs {
    pub checkpoint: PathBuf,
    pub sample: Option<String>,
    pub image: Option<PathBuf>,
    pub text: Option<String>,
    pub mode: TraceMode,
    pub rule: CrossRule,
    pub baseline: bool,
    pub cell_pixels: usize,
}

/// `color,row,col`, e.g. `red,1,2`.
pub fn parse_sample(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [color, row, col] = parts.as_slice() else {
        return Err(invalid(format!("sample must be `color,row,col`, got `{s}`")));
    };
    let c = COLORS
        .iter()
        .position(|(name, _)| name == color)
        .ok_or_else(|| invalid(format!("unknown colour `{color}`")))?;
    let row = row.parse().map_err(|_| invalid(format!("bad row `{row}`")))?;
    let col = col.parse().map_err(|_| invalid(format!("bad col `{col}`")))?;
    Ok((c, row, col))
}

fn write_maps(run: &mut RunDir, prefix: &str, res: &RGaeResult, image: &Image, cell_pixels: usize) -> Result<()> {
    run.write(format!("{prefix}text_to_query.csv"), csv_string(&res.text_to_query)?.as_bytes())?;
    run.write(format!("{prefix}query_to_patch.csv"), csv_string(&res.query_to_patch)?.as_bytes())?;
    run.write(format!("{prefix}text_to_patch.csv"), csv_string(&res.text_to_patch)?.as_bytes())?;
    for (name, base) in [("text_to_patch.pgm", None), ("text_to_patch_overlay.ppm", Some(image))] {
        let path = run.join(format!("{prefix}{name}"));
        render_patch_map(&res.text_to_patch, &path, cell_pixels, base)?;
        run.track(path);
    }
    let (m, _) = res.query_to_patch.dims2()?;
    if m.isqrt() * m.isqrt() == m {
        for p in render_query_grid(&res.query_to_patch, run.join(format!("{prefix}query_grid")), cell_pixels)? {
            run.track(p);
        }
    }
    Ok(())
}

pub fn cmd_explain(run: &mut RunDir, args: &ExplainArgs) -> Result<()> {
    require(&args.checkpoint)?;
    run.add_input(&args.checkpoint)?;
    run.set_config(&format!(
        "rule = {}\ntrace_mode = {}\nbaseline = {}\n",
        args.rule,
        args.mode,
        if args.baseline { "raw-attn" } else { "none" }
    ))?;
    let model = Mllm::load(&args.checkpoint)?;
    let side = model.config().patch_grid_side;
    let vocab = model.vocab().clone();

    let (image, default_text) = match (&args.sample, &args.image) {
        (Some(s), None) => {
            let (c, r, col) = parse_sample(s)?;
            if r >= side || col >= side {
                return Err(invalid(format!("cell ({r}, {col}) outside the {side}x{side} grid")));
            }
            let task = SyntheticTask::new(side, 0);
            (task.render(c, r, col), Some(task.caption_text(c, r, col)))
        }
        (None, Some(path)) => {
            require(path)?;
            run.add_input(path)?;
            let cells = trace_io::read_csv(path)?;
            let n = cells.shape()[0];
            let s = n.isqrt();
            if s * s != n {
                return Err(invalid(format!("image has {n} cells, not a square grid")));
            }
            (Image::new(s, cells)?, None)
        }
        _ => bail!(invalid("give exactly one of --sample or --image")),
    };

    let text = args.text.clone().or(default_text);
    let oracle = match &text {
        Some(t) => Some(vocab.encode(t)?),
        None => None,
    };
    let max_len = model.config().max_text_len - vocab.prompt().len();
    let record = match args.mode {
        TraceMode::TeacherForced => {
            let o = oracle.ok_or_else(|| invalid("teacher-forced tracing needs --text or --sample"))?;
            model.generate(&image, &vocab.prompt(), o.len(), TraceMode::TeacherForced, Some(&o))?
        }
        TraceMode::Greedy => model.generate(&image, &vocab.prompt(), max_len, TraceMode::Greedy, None)?,
    };
    println!("tokens: {}", vocab.decode(&record.tokens));

    let res = explain(&record, ExplainOptions::with_rule(args.rule))?;
    let mut records: Vec<Record> = record.to_records();
    records.push(Record::new("encoder/patches/map", model.encode(&image)?.patches));
    records.extend(res.to_records("rgae"));
    write_maps(run, "", &res, &image, args.cell_pixels)?;
    if args.baseline {
        let base = raw_attention_baseline(&record)?;
        records.extend(base.to_records("baseline"));
        write_maps(run, "baseline_", &base, &image, args.cell_pixels)?;
    }
    let trace = run.join("trace.rgae");
    trace_io::write_trace(&trace, &records)?;
    run.track(trace);
    println!("text_to_patch: {}", row_string(&res.text_to_patch));
    Ok(())
}

fn row_string(t: &Tensor) -> String {
    t.data().iter().map(|&v| format_g17(v)).collect::<Vec<_>>().join(",")
}

pub struct PoolArgs {
    pub input: PathBuf,
    pub name: Option<String>,
    pub mode: PoolMode,
    pub out_side: usize,
}

/// Reads a 2-D tensor from a CSV file or a named record of a trace file.
pub fn load_tensor(run: &mut RunDir, path: &Path, name: Option<&str>) -> Result<Tensor> {
    require(path)?;
    run.add_input(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        return Ok(trace_io::read_csv(path)?);
    }
    let records = trace_io::read_trace(path)?;
    let name = match name {
        Some(n) => n.to_string(),
        None if records.len() == 1 => records[0].name.clone(),
        None => bail!(invalid(format!(
            "{} holds {} records; choose one with --name",
            path.display(),
            records.len()
        ))),
    };
    Ok(trace_io::find(&records, &name)?.clone())
}

pub fn plan_listing(plan: &PoolPlan) -> String {
    let mut out = format!(
        "in_side {}\nout_side {}\nin_tokens {}\nout_tokens {}\n",
        plan.in_side(),
        plan.out_side(),
        plan.in_tokens(),
        plan.out_tokens()
    );
    match plan.uniform_kernel() {
        Some((k, s)) => {
            let _ = writeln!(out, "kernel {k}\nstride {s}");
        }
        None => out.push_str("kernel variable\n"),
    }
    for (i, b) in plan.bins().iter().enumerate() {
        let _ = writeln!(out, "bin {i} [{}, {})", b.start, b.end);
    }
    out
}

pub fn cmd_pool(run: &mut RunDir, args: &PoolArgs) -> Result<()> {
    run.set_config(&format!("mode = {}\nout_side = {}\n", args.mode.as_str(), args.out_side))?;
    let x = load_tensor(run, &args.input, args.name.as_deref())?;
    let (n, _) = x.dims2()?;
    let side = n.isqrt();
    if side * side != n {
        return Err(invalid(format!("input has {n} rows, not a square patch grid")));
    }
    let plan = plan_bins(side, args.out_side)?;
    let mut records = Vec::new();
    let out = match args.mode {
        PoolMode::Avg => pool_avg(&x, &plan)?,
        PoolMode::Max => {
            let r = pool_max(&x, &plan)?;
            let idx = Tensor::new(
                vec![r.argmax.out_tokens, r.argmax.channels],
                r.argmax.index.iter().map(|&i| i as f64).collect(),
            )?;
            records.push(Record::new("pool/argmax/map", idx));
            r.output
        }
    };
    records.insert(0, Record::new("pool/output/map", out.clone()));
    let path = run.join("pooled.rgae");
    trace_io::write_trace(&path, &records)?;
    run.track(path);
    run.write("pooled.csv", csv_string(&out)?.as_bytes())?;
    run.write("plan.txt", plan_listing(&plan).as_bytes())?;
    println!("pooled {}x{} -> {:?}", side, side, out.shape());
    Ok(())
}

pub struct GradcheckArgs {
    pub config: Option<PathBuf>,
    pub tolerance: f64,
    pub step: f64,
}

pub fn cmd_gradcheck(run: &mut RunDir, args: &GradcheckArgs) -> Result<()> {
    let cfg = load_config(run, args.config.as_deref())?;
    let reports = gradcheck_suite(&cfg.model, args.step)?;
    let mut csv = String::from("check,max_rel_error,passed\n");
    let mut worst = 0.0f64;
    for r in &reports {
        let ok = r.passed(args.tolerance);
        println!("{:<44} {:.3e} {}", r.name, r.max_rel_error, if ok { "ok" } else { "FAIL" });
        let _ = writeln!(csv, "{},{},{}", r.name, format_g17(r.max_rel_error), ok);
        worst = worst.max(r.max_rel_error);
    }
    run.write("gradcheck.csv", csv.as_bytes())?;
    println!("max relative error: {worst:e} (tolerance {:e}, step {:e})", args.tolerance, args.step);
    if worst >= args.tolerance {
        return Err(ToleranceExceeded(worst, args.tolerance).into());
    }
    Ok(())
}

pub struct CompareArgs {
    pub config: Option<PathBuf>,
    pub steps: Option<usize>,
    pub eval_samples: Option<usize>,
}

pub fn cmd_compare(run: &mut RunDir, args: &CompareArgs) -> Result<()> {
    let cfg = load_config(run, args.config.as_deref())?;
    let mut tc = cfg.train.clone();
    if let Some(s) = args.steps {
        tc.steps_stage1 = s;
    }
    let mut opts = CompareOptions::for_grid(cfg.model.clone(), tc);
    if let Some(e) = args.eval_samples {
        opts.eval_samples = e;
    }
    let points = compare(&opts)?;
    let csv = compare_csv(&points);
    print!("{csv}");
    run.write("compare.csv", csv.as_bytes())?;
    Ok(())
}

pub struct RenderArgs {
    pub input: PathBuf,
    pub name: Option<String>,
    pub output: String,
    pub cell_pixels: usize,
    pub grid: bool,
}

pub fn cmd_render(run: &mut RunDir, args: &RenderArgs) -> Result<()> {
    run.set_config(&format!("cell_pixels = {}\ngrid = {}\n", args.cell_pixels, args.grid))?;
    let map = load_tensor(run, &args.input, args.name.as_deref())?;
    if args.grid {
        for p in render_query_grid(&map, run.join(&args.output), args.cell_pixels)? {
            println!("{}", p.display());
            run.track(p);
        }
    } else {
        let path = run.join(&args.output);
        render_patch_map(&map, &path, args.cell_pixels, None).context("cannot render map")?;
        println!("{}", path.display());
        run.track(path);
    }
    Ok(())
}
