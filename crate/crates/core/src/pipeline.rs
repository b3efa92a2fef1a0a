//! The three-step procedure: split the panel into blocks, fit the blocks
//! independently, and integrate the fits.

use cpu_time::ThreadTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DimmError, Result};
use crate::gmm::{integrate, IntegratedFit};
use crate::model::{partition_dataset, BlockPartition, PanelDataset};
use crate::pairwise::{fit_block, BlockFit, FitOptions};

/// CPU seconds spent in each phase.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTiming {
    /// One entry per fitted block, in block order.
    pub block_cpu_seconds: Vec<f64>,
    pub integration_cpu_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct DimmFit {
    pub block_fits: Vec<BlockFit>,
    pub integrated: IntegratedFit,
    pub timing: PhaseTiming,
}

/// Resolves block names to partition indices, keeping partition order.
pub fn select_blocks(partition: &BlockPartition, names: &[String]) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Err(DimmError::Partition("empty block subset".into()));
    }
    let mut idx = Vec::with_capacity(names.len());
    for name in names {
        let j = partition.index_of(name).ok_or_else(|| DimmError::Partition(format!("unknown block `{name}`")))?;
        if idx.contains(&j) {
            return Err(DimmError::Partition(format!("block `{name}` selected twice")));
        }
        idx.push(j);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Fits the given blocks concurrently on the current rayon pool. Results
/// come back in input order whatever the scheduling.
pub fn fit_blocks(
    blocks: &[(String, PanelDataset, crate::model::Structure)],
    opts: &FitOptions,
) -> Result<(Vec<BlockFit>, Vec<f64>)> {
    let out: Vec<(BlockFit, f64)> = blocks
        .par_iter()
        .map(|(name, data, structure)| {
            let start = ThreadTime::now();
            let fit = fit_block(name, data, *structure, opts)?;
            Ok((fit, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().unzip())
}

/// Runs all three steps, optionally restricted to a named subset of blocks
/// (sub-group analysis). Only the selected blocks are fitted.
pub fn run_dimm(
    data: &PanelDataset,
    partition: &BlockPartition,
    opts: &FitOptions,
    subset: Option<&[String]>,
) -> Result<DimmFit> {
    let parts = partition_dataset(data, partition)?;
    let chosen = match subset {
        Some(names) => select_blocks(partition, names)?,
        None => (0..partition.len()).collect(),
    };
    let work: Vec<_> = chosen
        .iter()
        .map(|&j| {
            let spec = &partition.blocks()[j];
            (spec.name.clone(), parts[j].clone(), spec.structure)
        })
        .collect();
    let (block_fits, block_cpu_seconds) = fit_blocks(&work, opts)?;
    let block_data: Vec<PanelDataset> = work.into_iter().map(|w| w.1).collect();

    let start = ThreadTime::now();
    let integrated = integrate(&block_fits, &block_data)?;
    let timing = PhaseTiming { block_cpu_seconds, integration_cpu_seconds: start.elapsed().as_secs_f64() };
    Ok(DimmFit { block_fits, integrated, timing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockSpec, Structure};

    fn partition() -> BlockPartition {
        BlockPartition::new(vec![
            BlockSpec { name: "a".into(), size: 2, structure: Structure::Ar1 },
            BlockSpec { name: "b".into(), size: 3, structure: Structure::Cs },
            BlockSpec { name: "c".into(), size: 2, structure: Structure::Ar1 },
        ])
        .unwrap()
    }

    #[test]
    fn selection_resolves_in_partition_order() {
        let p = partition();
        assert_eq!(select_blocks(&p, &["c".into(), "a".into()]).unwrap(), vec![0, 2]);
        assert!(select_blocks(&p, &["z".into()]).is_err());
        assert!(select_blocks(&p, &["a".into(), "a".into()]).is_err());
        assert!(select_blocks(&p, &[]).is_err());
    }
}
