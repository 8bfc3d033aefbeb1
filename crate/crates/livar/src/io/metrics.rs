//! Round metrics CSV: `round,strategy,test_accuracy,mean_client_loss`,
//! optionally followed by one `alpha_m{m}_l{l}` column per client and layer
//! (clients from 0, layers from 1).

use std::io::Write;

use livar_core::fed::RoundMetrics;

pub fn metrics_header(clients: usize, layers: usize, dump_alphas: bool) -> Vec<String> {
    let mut h: Vec<String> = ["round", "strategy", "test_accuracy", "mean_client_loss"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if dump_alphas {
        for m in 0..clients {
            for l in 1..=layers {
                h.push(format!("alpha_m{m}_l{l}"));
            }
        }
    }
    h
}

pub fn metrics_record(m: &RoundMetrics, dump_alphas: bool) -> Vec<String> {
    let mut rec = vec![
        m.round.to_string(),
        m.strategy.to_string(),
        m.test_accuracy.to_string(),
        m.mean_client_loss.to_string(),
    ];
    if dump_alphas {
        rec.extend(m.alphas.alpha.iter().flatten().map(f64::to_string));
    }
    rec
}

pub fn write_metrics<W: Write>(w: W, rounds: &[RoundMetrics], dump_alphas: bool) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let (clients, layers) = rounds
        .first()
        .map_or((0, 0), |m| (m.alphas.num_clients(), m.alphas.num_layers()));
    out.write_record(metrics_header(clients, layers, dump_alphas))?;
    for m in rounds {
        out.write_record(metrics_record(m, dump_alphas))?;
    }
    out.flush()?;
    Ok(())
}
