/// Row-compressed directed edges over a batch of `batch` graphs with `nodes`
/// nodes each. Row `r = b * nodes + i` holds the edges whose query node is
/// `i` in graph `b`; `col` stores the key node `j` and `rel` the edge type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeList {
    pub batch: usize,
    pub nodes: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub rel: Vec<u8>,
}

impl EdgeList {
    /// Build from a dense `[batch, nodes, nodes]` id tensor; entries `> 0` are edges.
    pub fn from_dense(batch: usize, nodes: usize, ids: &[u8]) -> Self {
        debug_assert_eq!(ids.len(), batch * nodes * nodes);
        let mut row_ptr = Vec::with_capacity(batch * nodes + 1);
        let mut col = Vec::new();
        let mut rel = Vec::new();
        row_ptr.push(0);
        for r in 0..batch * nodes {
            let row = &ids[r * nodes..(r + 1) * nodes];
            for (j, &id) in row.iter().enumerate() {
                if id > 0 {
                    col.push(j);
                    rel.push(id);
                }
            }
            row_ptr.push(col.len());
        }
        EdgeList {
            batch,
            nodes,
            row_ptr,
            col,
            rel,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.col.len()
    }

    pub fn num_rows(&self) -> usize {
        self.batch * self.nodes
    }

    pub fn row_range(&self, row: usize) -> std::ops::Range<usize> {
        self.row_ptr[row]..self.row_ptr[row + 1]
    }

    /// Global (batch-flattened) index of the key node of edge `e` in row `row`.
    #[inline]
    pub fn key_index(&self, row: usize, e: usize) -> usize {
        (row / self.nodes) * self.nodes + self.col[e]
    }

    /// Scatter per-edge values into a dense `[batch, nodes, nodes]` buffer.
    pub fn scatter_dense<T: Copy + Default>(&self, values: &[T]) -> Vec<T> {
        let n = self.nodes;
        let mut out = vec![T::default(); self.batch * n * n];
        for row in 0..self.num_rows() {
            for e in self.row_range(row) {
                out[row * n + self.col[e]] = values[e];
            }
        }
        out
    }
}
