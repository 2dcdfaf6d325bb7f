use crowdtemp::data::{fit_normalizer, PhoneDataset};
use crowdtemp::estimator::init_params;
use crowdtemp::fedagg::{federated_round, keygen, write_transcript, ClientState, Schedule, Server};
use crowdtemp::meta::{
    build_task_set, encode_tasks, meta_batch_gradient, meta_step, meta_validate_with, MetaConfig,
};
use crowdtemp::nn::{OptimizerState, ParamVector};
use crowdtemp::rng::derive;

use super::{contributors, load_corpus, Context, FED_TABLE};
use crate::error::{AtStage, Result, Stage};
use crate::table::{num, write_file, Table};

pub const TRANSCRIPT: &str = "fed/transcript.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct FedRound {
    pub round: u64,
    pub clients: Vec<u32>,
    pub decryptions: u64,
    /// Largest parameter difference from the same update computed centrally
    /// on the union of all client tasks.
    pub max_diff_vs_central: f64,
    pub val_mae: f64,
    pub theta_checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedSummary {
    pub rounds: Vec<FedRound>,
}

fn max_diff(a: &ParamVector, b: &ParamVector) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Federated meta-training over the contributors with encrypted gradient
/// aggregation, shadowed by a plaintext centralized run for comparison.
pub fn run_fed(ctx: &Context) -> Result<FedSummary> {
    let stage = Stage::Fed;
    let phones = load_corpus(ctx, stage)?;
    let contribs = contributors(&phones);
    let fed = &ctx.config.fed;
    let seed = ctx.seed(stage);
    let trains: Vec<PhoneDataset> = contribs.iter().map(|p| p.train.clone()).collect();
    let vals: Vec<PhoneDataset> = contribs.iter().map(|p| p.val.clone()).collect();
    let norm = fit_normalizer(&trains).at(stage)?;
    let meta = MetaConfig {
        meta_optimizer: fed.meta_optimizer,
        beta: fed.beta,
        seed: derive(seed, 2),
        ..ctx.config.fewshot.meta
    };
    let pooled: Vec<f64> = trains
        .iter()
        .flat_map(|d| d.samples.iter().map(|s| s.label))
        .collect();
    let theta0 = init_params(&pooled, derive(seed, 0));
    let keys = keygen(fed.key_bits, derive(seed, 1)).at(stage)?;
    let mut server = Server::new(
        theta0.clone(),
        meta.meta_optimizer,
        meta.beta,
        keys,
        fed.frac_bits,
    );
    let clients: Vec<ClientState> = trains
        .iter()
        .enumerate()
        .map(|(i, d)| {
            ClientState::new(
                i as u32 + 1,
                d.clone(),
                norm.clone(),
                fed.tasks_per_client,
                meta,
                derive(seed, 10 + i as u64),
            )
        })
        .collect();
    let val_tasks = encode_tasks(
        &build_task_set(
            &vals,
            meta.k_spt,
            meta.k_qry,
            fed.val_tasks,
            derive(seed, 3),
        )
        .at(stage)?,
        &norm,
    );
    let schedule = if ctx.deterministic {
        Schedule::Sequential
    } else {
        Schedule::Threads
    };

    let mut central = theta0;
    let mut central_opt = OptimizerState::new(meta.meta_optimizer, meta.beta, central.len());
    let mut rounds = Vec::new();
    let mut table = Table::new(&[
        "round",
        "clients",
        "decryptions",
        "max_diff_vs_central",
        "val_mae",
        "theta_checksum",
    ]);
    for _ in 0..fed.rounds {
        let round = server.rounds_completed();
        let mut union = Vec::new();
        for c in &clients {
            union.extend(c.local_tasks(round).at(stage)?);
        }
        let enc = encode_tasks(&union, &norm);
        let refs: Vec<_> = enc.iter().collect();
        let g = meta_batch_gradient(&central, &refs, &meta.inner()).at(stage)?;
        meta_step(&mut central, &mut central_opt, &g).at(stage)?;

        let entry = federated_round(&mut server, &clients, schedule).at(stage)?;
        let r = FedRound {
            round: entry.round,
            clients: entry.client_ids.clone(),
            decryptions: server.decryptions(),
            max_diff_vs_central: max_diff(server.theta(), &central),
            val_mae: meta_validate_with(server.theta(), &val_tasks, &meta.fine_tune()).at(stage)?,
            theta_checksum: entry.theta_checksum,
        };
        let ids: Vec<String> = r.clients.iter().map(u32::to_string).collect();
        table.push(vec![
            r.round.to_string(),
            ids.join(" "),
            r.decryptions.to_string(),
            format!("{:.3e}", r.max_diff_vs_central),
            num(r.val_mae),
            r.theta_checksum.clone(),
        ]);
        rounds.push(r);
    }
    let mut log = Vec::new();
    write_transcript(server.transcript(), &mut log).at(stage)?;
    write_file(
        stage,
        &ctx.path(TRANSCRIPT),
        &String::from_utf8(log).expect("JSON is UTF-8"),
    )?;
    ctx.write_table(stage, FED_TABLE, &table)?;
    Ok(FedSummary { rounds })
}
