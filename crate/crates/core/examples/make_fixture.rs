//! Writes the packaged toy world to `fixtures/toy/`.

use std::path::Path;

use metalink::fixture::{toy_world, FixtureConfig};
use metalink::kb::{save_documents, save_entities, save_mentions};

fn main() -> metalink::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy");
    std::fs::create_dir_all(&dir).map_err(|e| metalink::Error::Config(e.to_string()))?;
    let f = toy_world(&FixtureConfig::default());
    save_entities(&dir.join("entities.jsonl"), f.kb.entities())?;
    save_documents(&dir.join("documents.jsonl"), &f.documents)?;
    save_mentions(&dir.join("seed.jsonl"), &f.seeds)?;
    save_mentions(&dir.join("test.jsonl"), &f.test)?;
    println!("wrote {}", dir.display());
    Ok(())
}
