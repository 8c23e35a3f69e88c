//! Replays the checked-in fuzz corpus, plus seeded byte mutations of it,
//! through both text parsers on the stable toolchain.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdmefem::config::parse_config;
use sdmefem::meshdof::parse_mesh;

fn corpus(target: &str) -> Vec<String> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds in {}", dir.display());
    files.iter().map(|f| std::fs::read_to_string(f).unwrap()).collect()
}

fn mutate(rng: &mut ChaCha8Rng, text: &str) -> String {
    const ALPHABET: &[u8] = b"[]=#,.-e0123456789 \nabcxyz_";
    let mut bytes = text.as_bytes().to_vec();
    for _ in 0..rng.gen_range(1..6) {
        let pos = rng.gen_range(0..=bytes.len());
        match rng.gen_range(0..3) {
            0 if pos < bytes.len() => {
                bytes.remove(pos);
            }
            1 if pos < bytes.len() => bytes[pos] = ALPHABET[rng.gen_range(0..ALPHABET.len())],
            _ => bytes.insert(pos, ALPHABET[rng.gen_range(0..ALPHABET.len())]),
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

#[test]
fn config_seeds_parse_and_round_trip() {
    for text in corpus("parse_config") {
        let cfg = parse_config(&text).unwrap();
        assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
    }
}

#[test]
fn mutated_configs_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let seeds = corpus("parse_config");
    for i in 0..3000 {
        let text = mutate(&mut rng, &seeds[i % seeds.len()]);
        if let Ok(cfg) = parse_config(&text) {
            assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg, "{text}");
        }
    }
}

#[test]
fn mesh_seeds_parse_and_round_trip() {
    for text in corpus("parse_mesh") {
        let mesh = parse_mesh(&text).unwrap();
        let again = parse_mesh(&mesh.to_text()).unwrap();
        assert_eq!(again.coords(), mesh.coords());
        assert_eq!(again.elements(), mesh.elements());
    }
}

#[test]
fn mutated_meshes_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let seeds = corpus("parse_mesh");
    for i in 0..3000 {
        let text = mutate(&mut rng, &seeds[i % seeds.len()]);
        if let Ok(mesh) = parse_mesh(&text) {
            let again = parse_mesh(&mesh.to_text()).unwrap();
            assert_eq!(again.num_elements(), mesh.num_elements());
        }
    }
}
