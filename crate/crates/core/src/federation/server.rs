use std::sync::Arc;

use super::client::{client_update, ClientReport, ClientState};
use super::ledger::{decode_message, encode_message, CommLedger, Direction};
use super::{aggregate, Sgd, TrainConfig};
use crate::benchgen::ClientData;
use crate::model::init_communicated;
use crate::model::{Backbone, ClientModel, NamedTensors, PeftConfig};
use crate::parallel::Executor;
use crate::rng::substream;
use crate::{Error, Result};

/// Per-client outcomes of one round, in client-id order.
#[derive(Clone, Debug)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientReport>,
    pub uplink_scalars: Vec<usize>,
}

/// A whole simulated federation: server state, every client, and the ledger.
///
/// With `communicate = false` the same loop runs without any messages or
/// aggregation (local-only finetuning).
#[derive(Debug)]
pub struct Federation {
    backbone: Arc<Backbone>,
    peft: PeftConfig,
    cfg: TrainConfig,
    seed: u64,
    communicate: bool,
    global: NamedTensors,
    /// Completed rounds.
    round: usize,
    clients: Vec<ClientState>,
    ledger: CommLedger,
    last_messages: Vec<(Direction, usize, Vec<u8>)>,
    executor: Executor,
}

impl Federation {
    pub fn new(
        backbone: Arc<Backbone>,
        peft: PeftConfig,
        cfg: TrainConfig,
        data: Vec<Arc<ClientData>>,
        seed: u64,
        workers: usize,
        communicate: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        peft.validate(&backbone.config)?;
        if data.is_empty() {
            return Err(Error::Federation("a federation needs at least one client".into()));
        }
        let global = init_communicated(&backbone, &peft, &mut substream(seed, "server", &[]));
        let clients = data
            .into_iter()
            .enumerate()
            .map(|(k, d)| {
                if d.train.len() < cfg.batch_size {
                    return Err(Error::Config(format!(
                        "client {k} has {} training samples, fewer than the batch size {}",
                        d.train.len(),
                        cfg.batch_size
                    )));
                }
                let mut rng = substream(seed, "client-init", &[k as u64]);
                let mut model = ClientModel::new(backbone.clone(), peft.clone(), d.n_classes(), &mut rng)?;
                if !communicate {
                    // local-only clients start from the same A_s a server would broadcast
                    model.install(&global)?;
                }
                Ok(ClientState {
                    id: k,
                    data: d,
                    model,
                    optimizer: Sgd::new(cfg.optimizer, cfg.lr, cfg.momentum),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            backbone,
            peft,
            cfg,
            seed,
            communicate,
            global,
            round: 0,
            clients,
            ledger: CommLedger::default(),
            last_messages: Vec::new(),
            executor: Executor::new(workers),
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn peft(&self) -> &PeftConfig {
        &self.peft
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn communicates(&self) -> bool {
        self.communicate
    }

    /// The server's current communicated set (A_s in adapter modes).
    pub fn global(&self) -> &NamedTensors {
        &self.global
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.cfg.rounds
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn clients_mut(&mut self) -> &mut [ClientState] {
        &mut self.clients
    }

    /// Applies `f` to every client on the round executor, results in client order.
    pub fn map_clients<R: Send>(&self, f: impl Fn(&ClientState) -> R + Sync) -> Vec<R> {
        self.executor.map(&self.clients, f)
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    /// Encoded messages of the last completed round as `(direction, client, bytes)`.
    pub fn last_messages(&self) -> &[(Direction, usize, Vec<u8>)] {
        &self.last_messages
    }

    /// Runs the next round: broadcast, client updates, uploads, aggregation.
    /// On any client error the round is abandoned and no state advances on
    /// the server.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        if self.is_finished() {
            return Err(Error::Federation(format!("all {} rounds already ran", self.cfg.rounds)));
        }
        let r = self.round + 1;
        let mut ledger = self.ledger.clone();
        let mut messages = Vec::new();
        if self.communicate {
            for c in &mut self.clients {
                let msg = encode_message(Direction::Down, r, c.id, &self.global);
                ledger.record(r, Direction::Down, c.id, self.global.scalar_count(), &msg);
                let payload = decode_message(&msg, Direction::Down, r, c.id)?;
                c.model.install(&payload)?;
                messages.push((Direction::Down, c.id, msg));
            }
        }
        let (cfg, seed) = (&self.cfg, self.seed);
        let results = self.executor.map_mut(&mut self.clients, |c| client_update(c, r, cfg, seed));
        let reports = results.into_iter().collect::<Result<Vec<_>>>()?;

        let mut uplink_scalars = vec![0; reports.len()];
        if self.communicate {
            let mut uploads = Vec::with_capacity(reports.len());
            for rep in &reports {
                let msg = encode_message(Direction::Up, r, rep.client, &rep.upload);
                ledger.record(r, Direction::Up, rep.client, rep.upload.scalar_count(), &msg);
                uplink_scalars[rep.client] = rep.upload.scalar_count();
                uploads.push((decode_message(&msg, Direction::Up, r, rep.client)?, rep.n_samples));
                messages.push((Direction::Up, rep.client, msg));
            }
            self.global = aggregate(&uploads, self.cfg.aggregation)?;
        }
        self.ledger = ledger;
        self.last_messages = messages;
        self.round = r;
        Ok(RoundReport {
            round: r,
            clients: reports,
            uplink_scalars,
        })
    }

    /// Runs every remaining round.
    pub fn run(&mut self) -> Result<Vec<RoundReport>> {
        let mut out = Vec::new();
        while !self.is_finished() {
            out.push(self.run_round()?);
        }
        Ok(out)
    }

    /// Every mutable tensor of the simulation: `server.*`, `client{k}.*` and
    /// `client{k}.opt.*` (optimizer velocity).
    pub fn state_tensors(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        for (n, t) in self.global.iter() {
            out.insert(format!("server.{n}"), t.clone());
        }
        for c in &self.clients {
            for (n, t) in c.model.params().iter() {
                out.insert(format!("client{}.{n}", c.id), t.clone());
            }
            for (n, t) in c.optimizer.state().iter() {
                out.insert(format!("client{}.opt.{n}", c.id), t.clone());
            }
        }
        out
    }

    /// Restores a snapshot taken by [`Federation::state_tensors`] after `round` rounds.
    pub fn restore(&mut self, state: &NamedTensors, round: usize, ledger: CommLedger) -> Result<()> {
        if round > self.cfg.rounds {
            return Err(Error::Checkpoint(format!(
                "checkpoint at round {round} exceeds the configured {} rounds",
                self.cfg.rounds
            )));
        }
        let global = state.renamed_prefix("server", "");
        let global: NamedTensors = global
            .iter()
            .map(|(n, t)| (n.trim_start_matches('.').to_string(), t.clone()))
            .collect();
        if !global.same_geometry(&self.global) {
            return Err(Error::Checkpoint("server tensors do not match the configured model".into()));
        }
        let mut restored = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let prefix = format!("client{}", c.id);
            let all = state.renamed_prefix(&prefix, "");
            let mut params = NamedTensors::new();
            let mut velocity = NamedTensors::new();
            for (n, t) in all.iter() {
                let n = n.trim_start_matches('.');
                match n.strip_prefix("opt.") {
                    Some(rest) => velocity.insert(rest.to_string(), t.clone()),
                    None => params.insert(n.to_string(), t.clone()),
                };
            }
            restored.push((params, velocity));
        }
        for (c, (params, velocity)) in self.clients.iter_mut().zip(restored) {
            c.model
                .set_params(params)
                .map_err(|e| Error::Checkpoint(format!("client {}: {e}", c.id)))?;
            c.optimizer.set_state(velocity);
        }
        self.global = global;
        self.round = round;
        self.ledger = ledger;
        Ok(())
    }
}
