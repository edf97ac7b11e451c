//! Writes a small synthetic PNG dataset and metadata CSV.
//!
//! `cargo run --example synthetic_dataset -- <dir> [patients] [seed]`

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = std::path::PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let patients = args.next().map_or(Ok(20), |s| s.parse())?;
    let seed = args.next().map_or(Ok(0), |s| s.parse())?;
    let (csv, images) = vdsnet::fixtures::write_synthetic_dataset(&dir, patients, 96, seed)?;
    println!("{}\n{}", csv.display(), images.display());
    Ok(())
}
