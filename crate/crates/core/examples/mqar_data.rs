//! Generates a small recall dataset, checks every example against the
//! generator contract and round-trips it through JSONL.

use precdelta::mqar::data::{check_example, read_jsonl, write_jsonl, PAD};
use precdelta::mqar::{generate_mqar, MqarConfig, IGNORE_INDEX};

fn main() -> precdelta::Result<()> {
    let cfg = MqarConfig::new(64, 4, 16, 1000, 1);
    let data = generate_mqar(&cfg)?;
    for ex in &data.examples {
        check_example(ex, &cfg)?;
    }
    let ex = &data.examples[0];
    println!("keys {:?}, values {:?}, pad {PAD}", cfg.key_range(), cfg.value_range());
    println!("tokens {:?}", ex.tokens);
    let labels: Vec<String> =
        ex.labels.iter().map(|&l| if l == IGNORE_INDEX { "-".into() } else { l.to_string() }).collect();
    println!("labels [{}]", labels.join(", "));

    let path = std::env::temp_dir().join("precdelta-mqar-example.jsonl");
    write_jsonl(&data.examples, &path)?;
    assert_eq!(read_jsonl(&path)?, data.examples);
    println!("{} examples written to {}", data.examples.len(), path.display());
    Ok(())
}
