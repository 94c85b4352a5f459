use std::path::PathBuf;

use latentbridge::data::load_directory_dataset;
use latentbridge::metrics::{evaluate_model, EvalOptions, Resize, Task};
use latentbridge::model::Domain;
use latentbridge::{Error, Scalar};

use crate::{DTypeArg, ModelArgs};

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset directory (read only).
    #[arg(long)]
    data: PathBuf,
    /// depth, seg or both.
    #[arg(long, default_value = "both")]
    task: Task,
    /// Split to score through its own encoder: real or sim.
    #[arg(long, default_value = "real")]
    domain: Domain,
    /// Comparison resolution: a side length or `native`.
    #[arg(long, default_value = "256")]
    resize: Resize,
    /// JSON report path; the CSV row goes next to it with a `.csv` extension.
    #[arg(long)]
    report: PathBuf,
}

pub fn run(a: EvalArgs) -> Result<(), Error> {
    match a.model.dtype {
        DTypeArg::F32 => eval::<f32>(&a),
        DTypeArg::F64 => eval::<f64>(&a),
    }
}

fn eval<T: Scalar>(a: &EvalArgs) -> Result<(), Error> {
    let model = a.model.load::<T>()?;
    let data = load_directory_dataset(&a.data)?;
    let opts = EvalOptions {
        task: a.task,
        resize: a.resize,
        domain: a.domain,
    };
    let report = evaluate_model(&model, &data, &opts)?;
    super::write_file(&a.report, report.to_json()?)?;
    super::write_file(&a.report.with_extension("csv"), report.to_csv())?;
    println!("{report}");
    Ok(())
}
