//! Trains one head on a synthetic corpus and prints test accuracy per epoch.
//!
//! cargo run --release --example synthetic_run -- cp-de 4 20000

use std::time::Instant;

use idiomlab::corpus::{build_token_vocabulary, generate_synthetic, split_80_10_10, SyntheticSpec};
use idiomlab::heads::HeadVariant;
use idiomlab::model::{ClozeModel, ModelConfig};
use idiomlab::training::{TrainConfig, Trainer};

fn main() -> idiomlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let head: HeadVariant = args.next().as_deref().unwrap_or("cp-de").parse()?;
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let corpus = generate_synthetic(&SyntheticSpec {
        examples: n,
        seed: 13,
        ..SyntheticSpec::default()
    })?;
    let (train, _dev, test) = split_80_10_10(&corpus.examples);
    let mean_len = train.iter().map(|e| e.tokens.len()).sum::<usize>() as f64 / train.len() as f64;
    println!("{} train examples, mean passage length {mean_len:.1}", train.len());
    let tokens = build_token_vocabulary(&corpus.examples, &corpus.vocab);
    let model = ClozeModel::<f64>::new(ModelConfig::new(head), tokens, corpus.vocab.clone())?;
    let mut trainer = Trainer::new(model, TrainConfig { epochs, ..TrainConfig::desk() })?;
    let per_epoch = trainer.config.steps_per_epoch(train.len());
    let start = Instant::now();
    for e in 1..=epochs {
        trainer.fit(&train, Some(e * per_epoch))?;
        let correct = test
            .iter()
            .filter(|ex| trainer.model.predict(ex).is_ok_and(|p| p.distribution.argmax() == ex.gold))
            .count();
        let batch = trainer.config.batch_size as f64;
        let last = trainer.log.last().map_or(0.0, |l| l.loss.total / batch);
        println!(
            "{head} epoch {e}: loss/ex {last:.3} test acc {:.4} ({:.0}s)",
            correct as f64 / test.len() as f64,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
