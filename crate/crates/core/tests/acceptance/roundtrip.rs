use plaid_core::corpus::{build_vocab, split_documents, validation_count, Vocabulary};
use plaid_core::{eval_nll, Checkpoint, DenoiserConfig, EvalOptions, Model, TrainConfig, TrainState};

use crate::smoke::corpus_bytes;
use crate::support::{rng, Checks, Outcome};

pub fn round_trips() -> Outcome {
    let mut c = Checks::default();

    let cfg = DenoiserConfig {
        vocab: 259,
        embed_dim: 4,
        width: 16,
        depth: 2,
        heads: 2,
        max_len: 16,
        mlp_ratio: 2,
        time_dim: 8,
        schedule_hidden: 3,
        ..Default::default()
    };
    let model = Model::new(cfg, &mut rng(61)).unwrap();
    let text = corpus_bytes();
    let tokens: Vec<u32> = text[..20_000].iter().map(|&b| b as u32).collect();
    let tc = TrainConfig { batch_size: 6, seq_len: 16, total_steps: 40, warmup_steps: 5, ..Default::default() };

    let mut straight = TrainState::new(model.clone(), 62);
    let mut metrics_a = Vec::new();
    plaid_core::train_loop(&mut straight, &tc, &tokens, 40, |_, m| {
        metrics_a.push(m.timeless());
        Ok(true)
    })
    .unwrap();

    let mut first = TrainState::new(model, 62);
    let mut metrics_b = Vec::new();
    plaid_core::train_loop(&mut first, &tc, &tokens, 17, |_, m| {
        metrics_b.push(m.timeless());
        Ok(true)
    })
    .unwrap();
    let bytes = Checkpoint::from_state(&first, Some(Vocabulary::byte_level())).to_bytes();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    c.check(loaded.to_bytes() == bytes, format!("save -> load -> save byte-identical ({} bytes)", bytes.len()));
    let mut resumed = loaded.into_state();
    c.check(resumed == first, "restored state equals saved state");
    plaid_core::train_loop(&mut resumed, &tc, &tokens, 40, |_, m| {
        metrics_b.push(m.timeless());
        Ok(true)
    })
    .unwrap();
    c.check(
        metrics_a == metrics_b && resumed == straight,
        format!("resume at step 17 reproduces all {} step records and the final state", metrics_a.len()),
    );

    let seqs: Vec<Vec<u32>> = tokens[..160].chunks(16).map(<[u32]>::to_vec).collect();
    let opts = EvalOptions { mc_draws: 2, seed: 3, ..Default::default() };
    let before = eval_nll(&straight.model, &seqs, &opts).unwrap();
    let after =
        eval_nll(&Checkpoint::from_bytes(&Checkpoint::from_state(&straight, None).to_bytes()).unwrap().model, &seqs, &opts).unwrap();
    c.check(before == after, "restored model gives identical evaluation");

    // tokenizer on the validation split
    let docs = split_documents(&text);
    let val = &docs[docs.len() - validation_count(docs.len())..];
    let byte_vocab = Vocabulary::byte_level();
    let merged = build_vocab(&text[..200_000], 300).unwrap();
    let mut ok = true;
    let mut bytes_checked = 0;
    for d in val {
        ok &= byte_vocab.decode(&byte_vocab.encode(d)).unwrap() == *d;
        ok &= merged.decode(&merged.encode(d)).unwrap() == *d;
        bytes_checked += d.len();
    }
    c.check(
        ok,
        format!(
            "encode/decode identity on {} validation documents ({bytes_checked} bytes), byte-level and {} merges",
            val.len(),
            merged.merges().len()
        ),
    );
    c.check(build_vocab(&text[..200_000], 300).unwrap() == merged, "vocabulary construction deterministic");
    c.outcome()
}
