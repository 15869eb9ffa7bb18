//! Write a synthetic train/test corpus with a manifest.
//!
//! cargo run --example gen_corpus -- [dir] [kind]

use latent_codec::corpus::{gen_corpus, ContentKind, CorpusManifest, CorpusSpec, Role, MANIFEST_NAME};

fn main() -> latent_codec::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "target/example-corpus".into());
    let kind: ContentKind = args.next().as_deref().unwrap_or("shapes").parse()?;
    let spec = CorpusSpec {
        kind,
        train: 8,
        test: 4,
        width: 64,
        height: 64,
        seed: 7,
    };
    gen_corpus(&dir, &spec)?;
    let path = std::path::Path::new(&dir).join(MANIFEST_NAME);
    let manifest = CorpusManifest::load(&path)?;
    println!("manifest: {}", path.display());
    println!("train images: {}", manifest.entries(Role::Train).count());
    println!("test images: {}", manifest.entries(Role::Test).count());
    println!("content hash: {}", manifest.content_hash()?);
    Ok(())
}
