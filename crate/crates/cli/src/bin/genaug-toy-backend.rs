//! Toy generator or detector served over the line-delimited JSON protocol on
//! stdin/stdout. Handy for exercising the external-backend path without models.

use std::io::{self, BufWriter};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use genaug_core::backend::protocol::{serve, ServedBackend};
use genaug_core::backend::toy::{
    calibrate_score_map, Quality, ToyDetector, ToyDetectorParams, ToyGenerator, ToyGeneratorParams,
};
use genaug_core::synth::empty_world;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Role {
    Generator,
    Detector,
}

#[derive(Debug, Parser)]
#[command(name = "genaug-toy-backend", version)]
struct Args {
    #[arg(long, value_enum)]
    role: Role,
    #[arg(long, default_value_t = 96)]
    patch_size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed sprite opacity; drawn per sample when absent.
    #[arg(long)]
    quality: Option<f64>,
    /// Calibrate the detector on this many samples over plain ground; 0 keeps
    /// the linear correlation map.
    #[arg(long, default_value_t = 0)]
    calibration_samples: usize,
}

fn build(args: &Args) -> Result<ServedBackend, String> {
    let generator = ToyGeneratorParams {
        quality: args.quality.map_or(Quality::Uniform, Quality::Fixed),
        seed: args.seed,
        ..Default::default()
    };
    Ok(match args.role {
        Role::Generator => ServedBackend::Generator(Box::new(ToyGenerator::new(generator).map_err(|e| e.to_string())?)),
        Role::Detector => {
            let mut params = ToyDetectorParams::for_patches(args.patch_size);
            if args.calibration_samples > 0 {
                let ground = empty_world(8, args.patch_size * 2, args.patch_size * 2, args.seed);
                let map = calibrate_score_map(
                    &generator,
                    &params,
                    &ground,
                    args.patch_size,
                    args.calibration_samples,
                    args.seed,
                )
                .map_err(|e| e.to_string())?;
                params = params.with_score_map(map);
            }
            ServedBackend::Detector(Box::new(ToyDetector::new(params).map_err(|e| e.to_string())?))
        }
    })
}

fn main() -> ExitCode {
    let args = Args::parse();
    let backend = match build(&args) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("genaug-toy-backend: {e}");
            return ExitCode::from(2);
        }
    };
    let stdin = io::stdin().lock();
    let stdout = BufWriter::new(io::stdout().lock());
    match serve(stdin, stdout, backend) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("genaug-toy-backend: {e}");
            ExitCode::from(2)
        }
    }
}
