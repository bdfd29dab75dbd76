//! Grid genotype for encoder architectures.
//!
//! A genotype lays `rows × cols` nodes on a grid. Each node carries a type id (number of
//! filters, kernel size, skip flag) and a single incoming connection, so following the
//! connections back from the output gene always yields one path from the input node. Only
//! the nodes on that path ("functioning" nodes) shape the network; the rest are free to
//! drift under neutral modification.
//!
//! Node ids are 1-based and column-major: `id = (col - 1) * rows + row`. Id 0 is the input.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Default number of attempts [`mutate_child`] makes before giving up.
pub const DEFAULT_MAX_MUTATION_ATTEMPTS: usize = 10_000;

/// Current on-disk version of the genotype text format.
pub const GENOTYPE_FORMAT_VERSION: u32 = 1;

/// One convolution choice: filter count, odd kernel size and whether the layer feeds a
/// skip connection to its mirrored decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub filters: usize,
    pub kernel: usize,
    pub skip: bool,
}

/// All `(filters, kernel, skip)` combinations, indexed by type id.
///
/// Ordering is filters-major, kernels-middle, skip-minor (`false` before `true`), each in
/// the order the sets were given.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeTypeTable {
    filters: Vec<usize>,
    kernels: Vec<usize>,
    entries: Vec<EncoderLayer>,
}

impl NodeTypeTable {
    pub fn new(filter_set: &[usize], kernel_set: &[usize]) -> Result<Self> {
        if filter_set.is_empty() {
            return Err(Error::Config("filter set is empty".into()));
        }
        if kernel_set.is_empty() {
            return Err(Error::Config("kernel set is empty".into()));
        }
        if let Some(f) = filter_set.iter().find(|&&f| f == 0) {
            return Err(Error::Config(format!("filter count must be positive, got {f}")));
        }
        if let Some(k) = kernel_set.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("kernel size must be odd, got {k}")));
        }
        if has_duplicates(filter_set) {
            return Err(Error::Config("duplicate entry in filter set".into()));
        }
        if has_duplicates(kernel_set) {
            return Err(Error::Config("duplicate entry in kernel set".into()));
        }
        let mut entries = Vec::with_capacity(filter_set.len() * kernel_set.len() * 2);
        for &filters in filter_set {
            for &kernel in kernel_set {
                for skip in [false, true] {
                    entries.push(EncoderLayer {
                        filters,
                        kernel,
                        skip,
                    });
                }
            }
        }
        Ok(Self {
            filters: filter_set.to_vec(),
            kernels: kernel_set.to_vec(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, type_id: usize) -> Option<EncoderLayer> {
        self.entries.get(type_id).copied()
    }

    pub fn entries(&self) -> &[EncoderLayer] {
        &self.entries
    }

    pub fn filter_set(&self) -> &[usize] {
        &self.filters
    }

    pub fn kernel_set(&self) -> &[usize] {
        &self.kernels
    }

    /// Type used for the nodes of the initial parent: the first entry with a skip
    /// connection. Skip layers never downsample, so the initial chain is valid for every
    /// input size.
    pub fn default_type_id(&self) -> usize {
        1
    }
}

fn has_duplicates(values: &[usize]) -> bool {
    let set: BTreeSet<_> = values.iter().collect();
    set.len() != values.len()
}

/// Convenience wrapper matching the table constructor.
pub fn build_type_table(filter_set: &[usize], kernel_set: &[usize]) -> Result<NodeTypeTable> {
    NodeTypeTable::new(filter_set, kernel_set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeGene {
    pub type_id: usize,
    pub connection: usize,
}

/// Fixed-length integer genotype on an `rows × cols` grid with level-back `level_back`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genotype {
    rows: usize,
    cols: usize,
    level_back: usize,
    genes: Vec<NodeGene>,
    output: usize,
}

/// Valid connection targets of one gene: optionally the input node, plus a contiguous
/// range of node ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConnDomain {
    input: bool,
    first: usize,
    last: usize,
}

impl ConnDomain {
    fn node_count(&self) -> usize {
        if self.last >= self.first && self.first > 0 {
            self.last - self.first + 1
        } else {
            0
        }
    }

    fn size(&self) -> usize {
        self.node_count() + usize::from(self.input)
    }

    fn contains(&self, id: usize) -> bool {
        if id == 0 {
            self.input
        } else {
            self.node_count() > 0 && id >= self.first && id <= self.last
        }
    }

    fn nth(&self, i: usize) -> usize {
        if self.input {
            if i == 0 {
                0
            } else {
                self.first + i - 1
            }
        } else {
            self.first + i
        }
    }

    fn sample(&self, rng: &mut Rng) -> usize {
        self.nth(rng.random_range(0..self.size()))
    }
}

impl Genotype {
    /// Builds a genotype from explicit genes, checking every invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        level_back: usize,
        genes: Vec<NodeGene>,
        output: usize,
        table: &NodeTypeTable,
    ) -> Result<Self> {
        check_dims(rows, cols, level_back)?;
        let g = Self {
            rows,
            cols,
            level_back,
            genes,
            output,
        };
        g.validate(table)?;
        Ok(g)
    }

    /// Uniformly random genotype satisfying every constraint.
    pub fn random(
        rows: usize,
        cols: usize,
        level_back: usize,
        table: &NodeTypeTable,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_dims(rows, cols, level_back)?;
        let mut g = Self {
            rows,
            cols,
            level_back,
            genes: Vec::with_capacity(rows * cols),
            output: 0,
        };
        for id in 1..=rows * cols {
            let type_id = rng.random_range(0..table.len());
            let connection = g.conn_domain(id).sample(rng);
            g.genes.push(NodeGene {
                type_id,
                connection,
            });
        }
        g.output = g.output_domain().sample(rng);
        Ok(g)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn level_back(&self) -> usize {
        self.level_back
    }

    pub fn genes(&self) -> &[NodeGene] {
        &self.genes
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn node_count(&self) -> usize {
        self.rows * self.cols
    }

    /// 1-based column of a node id (the input node is column 0).
    pub fn column_of(&self, id: usize) -> usize {
        if id == 0 {
            0
        } else {
            (id - 1) / self.rows + 1
        }
    }

    pub fn node_id(&self, col: usize, row: usize) -> usize {
        (col - 1) * self.rows + row
    }

    fn gene(&self, id: usize) -> &NodeGene {
        &self.genes[id - 1]
    }

    fn conn_domain(&self, id: usize) -> ConnDomain {
        let col = self.column_of(id);
        let lo = col.saturating_sub(self.level_back).max(1);
        let hi = col - 1;
        let (first, last) = if hi >= lo {
            ((lo - 1) * self.rows + 1, hi * self.rows)
        } else {
            (1, 0)
        };
        ConnDomain {
            input: col <= self.level_back,
            first,
            last,
        }
    }

    fn output_domain(&self) -> ConnDomain {
        let lo = (self.cols + 1).saturating_sub(self.level_back).max(1);
        ConnDomain {
            input: false,
            first: (lo - 1) * self.rows + 1,
            last: self.cols * self.rows,
        }
    }

    pub fn validate(&self, table: &NodeTypeTable) -> Result<()> {
        if self.genes.len() != self.rows * self.cols {
            return Err(Error::Config(format!(
                "genotype has {} node genes, expected {}",
                self.genes.len(),
                self.rows * self.cols
            )));
        }
        for (i, gene) in self.genes.iter().enumerate() {
            let id = i + 1;
            if gene.type_id >= table.len() {
                return Err(Error::Config(format!(
                    "node {id}: type id {} out of range 0..{}",
                    gene.type_id,
                    table.len()
                )));
            }
            if !self.conn_domain(id).contains(gene.connection) {
                return Err(Error::Config(format!(
                    "node {id}: connection {} violates level-back {}",
                    gene.connection, self.level_back
                )));
            }
        }
        if !self.output_domain().contains(self.output) {
            return Err(Error::Config(format!(
                "output connection {} outside the last {} columns",
                self.output, self.level_back
            )));
        }
        Ok(())
    }
}

fn check_dims(rows: usize, cols: usize, level_back: usize) -> Result<()> {
    if rows == 0 || cols == 0 || level_back == 0 {
        return Err(Error::Config(format!(
            "grid dimensions must be positive (rows={rows}, cols={cols}, level_back={level_back})"
        )));
    }
    Ok(())
}

/// Decoded encoder path, input side first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct EncoderSpec {
    pub layers: Vec<EncoderLayer>,
}

impl EncoderSpec {
    pub fn new(layers: Vec<EncoderLayer>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Number of layers without a skip connection.
    pub fn plain_count(&self) -> usize {
        self.layers.iter().filter(|l| !l.skip).count()
    }
}

/// Result of walking a genotype back from its output gene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub spec: EncoderSpec,
    /// Functioning node ids in input-to-output order.
    pub path: Vec<usize>,
}

impl Decoded {
    pub fn functioning(&self) -> BTreeSet<usize> {
        self.path.iter().copied().collect()
    }
}

pub fn decode(g: &Genotype, table: &NodeTypeTable) -> Decoded {
    let mut path = Vec::new();
    let mut id = g.output;
    while id != 0 {
        path.push(id);
        id = g.gene(id).connection;
    }
    path.reverse();
    let layers = path
        .iter()
        .map(|&id| {
            table
                .get(g.gene(id).type_id)
                .expect("genotype validated against its table")
        })
        .collect();
    Decoded {
        spec: EncoderSpec { layers },
        path,
    }
}

/// Initial parent: a one-layer encoder when the output gene can reach column 1, otherwise
/// the shortest chain of default-type nodes the level-back allows.
pub fn minimal_genotype(
    rows: usize,
    cols: usize,
    level_back: usize,
    table: &NodeTypeTable,
    rng: &mut Rng,
) -> Result<Genotype> {
    let mut g = Genotype::random(rows, cols, level_back, table, rng)?;
    let default_type = table.default_type_id();

    // Greedy: the first node sits in column L (the last that reads the input), then each
    // hop jumps L columns until the output gene's domain is reached.
    let chain_cols = if level_back >= cols {
        vec![1]
    } else {
        let first_output_col = cols + 1 - level_back;
        let mut col = level_back;
        let mut chain = vec![col];
        while col < first_output_col {
            col = (col + level_back).min(cols);
            chain.push(col);
        }
        chain
    };

    let mut prev = 0;
    for &c in &chain_cols {
        let id = g.node_id(c, 1);
        g.genes[id - 1] = NodeGene {
            type_id: default_type,
            connection: prev,
        };
        prev = id;
    }
    g.output = prev;
    debug_assert!(g.validate(table).is_ok());
    Ok(g)
}

/// Resamples each type field and each connection field independently with probability
/// `rate`; returns the child together with the number of fields that were resampled.
pub fn point_mutation_counted(
    g: &Genotype,
    table: &NodeTypeTable,
    rate: f64,
    rng: &mut Rng,
) -> (Genotype, usize) {
    let rate = rate.clamp(0.0, 1.0);
    let mut child = g.clone();
    let mut draws = 0;
    for id in 1..=child.node_count() {
        if rng.random_bool(rate) {
            child.genes[id - 1].type_id = rng.random_range(0..table.len());
            draws += 1;
        }
        if rng.random_bool(rate) {
            child.genes[id - 1].connection = child.conn_domain(id).sample(rng);
            draws += 1;
        }
    }
    if rng.random_bool(rate) {
        child.output = child.output_domain().sample(rng);
        draws += 1;
    }
    (child, draws)
}

pub fn point_mutation(g: &Genotype, table: &NodeTypeTable, rate: f64, rng: &mut Rng) -> Genotype {
    point_mutation_counted(g, table, rate, rng).0
}

/// Mutates the parent until the decoded architecture changes and passes `valid`.
///
/// Every attempt starts again from the parent.
pub fn mutate_child<F>(
    parent: &Genotype,
    table: &NodeTypeTable,
    rate: f64,
    rng: &mut Rng,
    max_attempts: usize,
    valid: F,
) -> Result<Genotype>
where
    F: Fn(&EncoderSpec) -> bool,
{
    if rate <= 0.0 {
        return Err(Error::Search(
            "mutation rate must be positive to produce a changed child".into(),
        ));
    }
    let parent_spec = decode(parent, table).spec;
    for _ in 0..max_attempts {
        let child = point_mutation(parent, table, rate, rng);
        let spec = decode(&child, table).spec;
        if spec != parent_spec && valid(&spec) {
            return Ok(child);
        }
    }
    Err(Error::Search(format!(
        "no valid changed child after {max_attempts} mutation attempts; \
         the grid or validity constraint is degenerate"
    )))
}

/// Outcome of [`neutral_modify`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeutralModification {
    pub genotype: Genotype,
    /// Set when the grid has no non-functioning node whose genes can change.
    pub noop: bool,
}

/// Resamples only genes of non-functioning nodes, so the decoded architecture is kept.
/// At least one field is guaranteed to change whenever any field is able to.
pub fn neutral_modify(
    parent: &Genotype,
    table: &NodeTypeTable,
    rate: f64,
    rng: &mut Rng,
) -> NeutralModification {
    let functioning = decode(parent, table).functioning();
    let idle: Vec<usize> = (1..=parent.node_count())
        .filter(|id| !functioning.contains(id))
        .collect();
    // (node id, is_type_field) for every field with more than one possible value.
    let mutable: Vec<(usize, bool)> = idle
        .iter()
        .flat_map(|&id| [(id, true), (id, false)])
        .filter(|&(id, is_type)| {
            if is_type {
                table.len() > 1
            } else {
                parent.conn_domain(id).size() > 1
            }
        })
        .collect();
    if mutable.is_empty() {
        return NeutralModification {
            genotype: parent.clone(),
            noop: true,
        };
    }

    let rate = rate.clamp(0.0, 1.0);
    let mut child = parent.clone();
    for &id in &idle {
        if rng.random_bool(rate) {
            child.genes[id - 1].type_id = rng.random_range(0..table.len());
        }
        if rng.random_bool(rate) {
            child.genes[id - 1].connection = child.conn_domain(id).sample(rng);
        }
    }
    if child == *parent {
        // Force one field to a different value.
        let (id, is_type) = mutable[rng.random_range(0..mutable.len())];
        let gene = &mut child.genes[id - 1];
        if is_type {
            let shift = rng.random_range(1..table.len());
            gene.type_id = (gene.type_id + shift) % table.len();
        } else {
            let domain = parent.conn_domain(id);
            let current = (0..domain.size())
                .position(|i| domain.nth(i) == gene.connection)
                .expect("connection lies in its domain");
            let shift = rng.random_range(1..domain.size());
            gene.connection = domain.nth((current + shift) % domain.size());
        }
    }
    NeutralModification {
        genotype: child,
        noop: false,
    }
}

#[derive(Serialize, Deserialize)]
struct GenotypeDoc {
    version: u32,
    rows: usize,
    cols: usize,
    level_back: usize,
    filters: Vec<usize>,
    kernels: Vec<usize>,
    output: usize,
    genes: Vec<[usize; 2]>,
}

/// Serializes a genotype (with the parameters of its type table) to TOML.
pub fn genotype_to_text(g: &Genotype, table: &NodeTypeTable) -> String {
    let doc = GenotypeDoc {
        version: GENOTYPE_FORMAT_VERSION,
        rows: g.rows,
        cols: g.cols,
        level_back: g.level_back,
        filters: table.filters.clone(),
        kernels: table.kernels.clone(),
        output: g.output,
        genes: g.genes.iter().map(|n| [n.type_id, n.connection]).collect(),
    };
    toml::to_string(&doc).expect("genotype document serializes")
}

pub fn genotype_from_text(text: &str) -> Result<(Genotype, NodeTypeTable)> {
    let doc: GenotypeDoc = toml::from_str(text).map_err(|e| Error::Format {
        what: "genotype",
        message: e.to_string(),
    })?;
    if doc.version != GENOTYPE_FORMAT_VERSION {
        return Err(Error::Format {
            what: "genotype",
            message: format!("unsupported version {}", doc.version),
        });
    }
    let table = NodeTypeTable::new(&doc.filters, &doc.kernels)?;
    let genes = doc
        .genes
        .iter()
        .map(|&[type_id, connection]| NodeGene {
            type_id,
            connection,
        })
        .collect();
    let g = Genotype::from_parts(doc.rows, doc.cols, doc.level_back, genes, doc.output, &table)?;
    Ok((g, table))
}

impl fmt::Display for EncoderLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.skip { "CS" } else { "C" };
        write!(f, "{tag}({},{})", self.filters, self.kernel)
    }
}
