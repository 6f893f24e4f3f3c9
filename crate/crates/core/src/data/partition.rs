use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use super::{Corpus, Split};
use crate::error::{Error, Result};

const MAX_SKEW_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Iid,
    /// Per-category Dirichlet(alpha) allocation across clients.
    LabelSkew { alpha: f64 },
}

/// Document indices owned by the server proxy and by each client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub proxy: Vec<usize>,
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Splits the train split into a proxy shard (carved first, the size of the
/// largest client shard under an even split) and `k` client shards.
pub fn partition(corpus: &Corpus, k: usize, scheme: Scheme, seed: u64) -> Result<Partition> {
    if k == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    let mut idx = corpus.indices(Split::Train);
    if idx.len() < k + 1 {
        return Err(Error::Data(format!(
            "{} training documents cannot fill {} client shards and a proxy shard",
            idx.len(),
            k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let proxy_len = idx.len().div_ceil(k + 1);
    let rest = idx.split_off(proxy_len);
    let proxy = idx;

    let clients = match scheme {
        Scheme::Iid => {
            let mut clients = vec![Vec::new(); k];
            for (i, d) in rest.into_iter().enumerate() {
                clients[i % k].push(d);
            }
            clients
        }
        Scheme::LabelSkew { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::Config("label skew alpha must be positive and finite".into()));
            }
            let mut by_cat: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for d in rest {
                by_cat.entry(corpus.docs[d].category).or_default().push(d);
            }
            skew_allocate(&by_cat, k, alpha, &mut rng)?
        }
    };
    Ok(Partition { proxy, clients })
}

fn skew_allocate(
    by_cat: &BTreeMap<usize, Vec<usize>>,
    k: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if k == 1 {
        return Ok(vec![by_cat.values().flatten().copied().collect()]);
    }
    let dir = Dirichlet::new_with_size(alpha, k).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..MAX_SKEW_DRAWS {
        let mut clients = vec![Vec::new(); k];
        for docs in by_cat.values() {
            let p: Vec<f64> = dir.sample(rng);
            let n = docs.len() as f64;
            let mut cum = 0.0;
            let mut start = 0;
            for (c, pc) in p.iter().enumerate() {
                cum += pc;
                let end = if c + 1 == k { docs.len() } else { ((cum * n).round() as usize).min(docs.len()) };
                clients[c].extend_from_slice(&docs[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if clients.iter().all(|c| !c.is_empty()) {
            for c in &mut clients {
                c.sort_unstable();
            }
            return Ok(clients);
        }
    }
    Err(Error::Data(format!(
        "label skew with alpha {} left a client without data in {} draws",
        alpha, MAX_SKEW_DRAWS
    )))
}
