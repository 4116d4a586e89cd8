use std::path::PathBuf;

use clap::Args;

use scot_core::synth::{gen_dataset, gen_world, DatasetSpec};

use crate::failure::{Context, Failure};
use crate::settings::Resolver;

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Image noise scale; per-coordinate std is sigma/sqrt(dim).
    #[arg(long)]
    sigma_img: Option<f64>,
    /// Text noise scale.
    #[arg(long)]
    sigma_txt: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    gallery_size: Option<usize>,
    /// Fraction of image targets replaced by a wrong concept.
    #[arg(long)]
    corruption: Option<f64>,
    /// Labelled subset size per query; 0 disables subsets.
    #[arg(long)]
    subset_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run(a: SynthArgs, mut r: Resolver) -> Result<(), Failure> {
    let d = DatasetSpec::default();
    let out: PathBuf = r.required("out", a.out)?;
    let concepts = r.value("concepts", a.concepts, 16)?;
    let dim = r.value("dim", a.dim, 32)?;
    let sigma_img = r.value("sigma_img", a.sigma_img, 0.05)?;
    let sigma_txt = r.value("sigma_txt", a.sigma_txt, 0.05)?;
    let spec = DatasetSpec {
        n_train: r.value("n_train", a.n_train, d.n_train)?,
        n_eval: r.value("n_eval", a.n_eval, d.n_eval)?,
        gallery_size: r.value("gallery_size", a.gallery_size, d.gallery_size)?,
        corruption: r.value("corruption", a.corruption, d.corruption)?,
        subset_size: r.value("subset_size", a.subset_size, d.subset_size)?,
    };
    let seed = r.value("seed", a.seed, 0u64)?;
    r.finish()?;

    let world = gen_world(concepts, dim, sigma_img, sigma_txt, seed)?;
    let data = gen_dataset(&world, &spec, seed)?;
    data.write_to_dir(&out).at(out.display())?;
    r.write_snapshot(&out.join("config.toml"))?;
    println!(
        "train={} queries={} gallery={} dim={}",
        data.train.len(),
        data.queries.len(),
        data.gallery.len(),
        dim
    );
    Ok(())
}
