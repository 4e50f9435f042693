use clap::Parser;
use ifmm::cli::{run, run_comparison, run_scaling, to_csv, CliArgs, CliError, Format, Precond, RunReport};
use ifmm::kernel::{generate_scene, write_scene};
use std::io::Write;
use std::process::ExitCode;

fn emit(args: &CliArgs, json: String, runs: &[RunReport]) -> Result<(), CliError> {
    let text = match args.format {
        Format::Json => json,
        Format::Csv => to_csv(runs),
    };
    match &args.out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn main_inner() -> Result<(), CliError> {
    faer::set_global_parallelism(faer::Par::Seq);
    let args = CliArgs::parse();
    let cfg = args.resolve()?;
    if let Some(path) = &args.export_scene {
        let scene = generate_scene(&cfg.scene_spec())?;
        let f = std::fs::File::create(path)?;
        write_scene(&scene, std::io::BufWriter::new(f))?;
    }
    if let Some(sizes) = &args.sweep {
        let rep = run_scaling(&cfg, sizes)?;
        let json = serde_json::to_string_pretty(&rep).expect("report serializes");
        return emit(&args, json, &rep.runs);
    }
    if args.compare_precond {
        let rep = run_comparison(&cfg, &[Precond::None, Precond::Blockdiag, Precond::Ifmm])?;
        let json = serde_json::to_string_pretty(&rep).expect("report serializes");
        return emit(&args, json, &rep.runs);
    }
    let rep = run(&cfg)?;
    let json = serde_json::to_string_pretty(&rep).expect("report serializes");
    emit(&args, json, std::slice::from_ref(&rep))
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
