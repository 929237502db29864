//! Regenerates `fixtures/toy30` (corpus, simulator script, config and the
//! recorded cassette). Run with `cargo run -p skillslice-cli --example make_fixture`.

use std::path::PathBuf;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let dir = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy30"));
    skillslice_cli::fixture::write_fixture(&dir)?;
    println!("fixture written to {}", dir.display());
    Ok(())
}
