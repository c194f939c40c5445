//! JSON dumps of subgraphs and attention maps for inspection.

use serde::Serialize;

use crate::autodiff::{Scalar, Tape};
use crate::data::{DialogueBatch, DialogueRecord, Modality};
use crate::diffrgcn::LayerGraph;
use crate::error::{Error, Result};
use crate::graph::{build_subgraphs, SubgraphDump};
use crate::harness::train::{Checkpoint, StoredTensor};
use crate::model::{self, ForwardOptions, ModelTrace};

/// Subgraphs of each record; ids `0` none, `1` self, `2`/`3` same speaker
/// past/future, `4`/`5` other speaker future/past.
pub fn graph_dump(records: &[DialogueRecord], window: usize) -> Vec<SubgraphDump<'_>> {
    records
        .iter()
        .map(|r| {
            let n = r.len();
            let sub = build_subgraphs(&r.speakers, &vec![true; n], 1, n, window);
            SubgraphDump {
                id: &r.id,
                window,
                adj_s: sub.adj_s.to_nested().remove(0),
                adj_c: sub.adj_c.to_nested().remove(0),
            }
        })
        .collect()
}

#[derive(Serialize)]
pub struct LayerDump {
    pub modality: &'static str,
    pub depth: usize,
    pub graph: &'static str,
    pub lambda_full: Vec<f64>,
    /// `[L, L]` per head; row `i` holds the weights of node `i` over its neighbours.
    pub heads: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
pub struct AttentionDump {
    pub id: String,
    pub speakers: Vec<usize>,
    pub labels: Vec<i64>,
    /// Encoder self-attention `[heads, L, L]` per modality (`None` when the
    /// text path has no transformer).
    pub encoder: Vec<(String, Option<StoredTensor>)>,
    pub graph: Vec<LayerDump>,
}

fn square(t: &[f64], l: usize) -> Vec<Vec<f64>> {
    t.chunks(l).map(<[f64]>::to_vec).collect()
}

/// Attention maps of one dialogue under the checkpoint's parameters.
pub fn attention_dump(ck: &Checkpoint, record: &DialogueRecord) -> Result<AttentionDump> {
    match ck.precision.as_str() {
        "f32" => attention_dump_typed::<f32>(ck, record),
        _ => attention_dump_typed::<f64>(ck, record),
    }
}

fn attention_dump_typed<T: Scalar>(ck: &Checkpoint, record: &DialogueRecord) -> Result<AttentionDump> {
    if record.is_empty() {
        return Err(Error::Data(format!("dialogue `{}` is empty", record.id)));
    }
    let store = ck.param_store::<T>()?;
    let mcfg = &ck.model;
    let batch = DialogueBatch::<T>::collate(&[record], mcfg.encoder.n_speakers, mcfg.encoder.dims)?;
    let mut trace = ModelTrace::default();
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        trace: Some(&mut trace),
        ..ForwardOptions::default()
    };
    model::forward(&mut tape, &store, mcfg, &batch, opts)?;
    let l = record.len();
    let encoder = Modality::ALL
        .iter()
        .map(|&m| (m.short().to_string(), trace.encoder[m.index()].as_ref().map(|t| StoredTensor::from_tensor(t))))
        .collect();
    let mut graph = Vec::new();
    for m in Modality::ALL {
        for layer in &trace.graph[m.index()] {
            graph.push(LayerDump {
                modality: m.short(),
                depth: layer.depth,
                graph: match layer.graph {
                    LayerGraph::Inter => "inter",
                    LayerGraph::Intra => "intra",
                },
                lambda_full: layer.lambda_full.clone(),
                heads: layer
                    .heads
                    .iter()
                    .map(|h| square(&h.data().iter().map(|x| x.f64()).collect::<Vec<_>>(), l))
                    .collect(),
            });
        }
    }
    Ok(AttentionDump {
        id: record.id.clone(),
        speakers: record.speakers.clone(),
        labels: record.labels.clone(),
        encoder,
        graph,
    })
}
