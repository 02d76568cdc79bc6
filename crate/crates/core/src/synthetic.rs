//! Deterministic periodic toy graphs for end-to-end checks and benchmarks.

use std::path::Path;

use crate::data::{Dataset, DatasetSplit, Granularity, Quadruple, Vocabularies};
use crate::error::Result;

/// Parameters of the periodic successor walk.
#[derive(Debug, Clone, Copy)]
pub struct PeriodicSpec {
    pub entities: usize,
    pub relations: usize,
    pub times: usize,
    /// Facts at `t < train_end` form the train split.
    pub train_end: usize,
    /// Facts at `train_end <= t < valid_end` form the valid split; the rest
    /// is test.
    pub valid_end: usize,
}

impl PeriodicSpec {
    /// 20 entities, 4 relations, 24 timestamps; future steps held out.
    pub fn default_small() -> Self {
        Self {
            entities: 20,
            relations: 4,
            times: 24,
            train_end: 20,
            valid_end: 22,
        }
    }

    /// One fact per entity per timestep. Entity `i`'s active relation
    /// advances cyclically each step (`j = (i + t) mod relations`) and its
    /// object is the ring successor shifted by the relation id
    /// (`o = i + 1 + j`). The pattern repeats with period `entities`, so
    /// held-out future steps replay earlier configurations, and every entity
    /// accumulates enough history that chain sampling stays active.
    pub fn facts(&self) -> Vec<Quadruple> {
        let mut quads = Vec::with_capacity(self.times * self.entities);
        for t in 0..self.times {
            for i in 0..self.entities {
                let j = (i + t) % self.relations;
                let object = (i + 1 + j) % self.entities;
                quads.push(Quadruple {
                    subject: i,
                    predicate: j,
                    object,
                    timestamp: t,
                });
            }
        }
        quads
    }

    pub fn dataset(&self) -> Dataset {
        let facts = self.facts();
        let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for q in facts {
            if q.timestamp < self.train_end {
                train.push(q);
            } else if q.timestamp < self.valid_end {
                valid.push(q);
            } else {
                test.push(q);
            }
        }
        let vocabs = Vocabularies::from_names(
            (0..self.entities).map(|e| format!("e{e}")).collect(),
            (0..self.relations).map(|r| format!("step{r}")).collect(),
            (0..self.times).map(|t| t.to_string()).collect(),
            Granularity::Index,
        );
        let splits = DatasetSplit {
            train,
            valid,
            test,
            granularity: Granularity::Index,
        };
        // Hash stands in for file content; the generator is fully determined
        // by its parameters.
        let content_hash = format!(
            "synthetic-periodic-{}-{}-{}-{}-{}",
            self.entities, self.relations, self.times, self.train_end, self.valid_end
        );
        Dataset {
            splits,
            vocabs,
            content_hash,
        }
    }

    /// Write the dataset as ordinary tab-separated split files, so the file
    /// loader can ingest it like any other dataset.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        let ds = self.dataset();
        for (name, quads) in [
            ("train.txt", &ds.splits.train),
            ("valid.txt", &ds.splits.valid),
            ("test.txt", &ds.splits.test),
        ] {
            let mut text = String::new();
            for q in quads {
                text.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    ds.vocabs.entity_name(q.subject),
                    ds.vocabs.relation_name(q.predicate),
                    ds.vocabs.entity_name(q.object),
                    q.timestamp
                ));
            }
            std::fs::write(dir.join(name), text)?;
        }
        Ok(())
    }
}
