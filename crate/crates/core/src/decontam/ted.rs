//! Ordered tree edit distance with unit costs (Zhang & Shasha keyroot dynamic program).

use serde::{Deserialize, Serialize};

/// An ordered, labeled tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledTree {
    pub label: String,
    pub children: Vec<LabeledTree>,
}

impl LabeledTree {
    pub fn new(label: impl Into<String>, children: Vec<LabeledTree>) -> Self {
        LabeledTree { label: label.into(), children }
    }

    pub fn leaf(label: impl Into<String>) -> Self {
        Self::new(label, Vec::new())
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(LabeledTree::size).sum::<usize>()
    }
}

/// Postorder flattening: `labels[i]` and `leftmost[i]` (index of the leftmost leaf
/// descendant of node `i`), both 0-based.
struct Postorder<'a> {
    labels: Vec<&'a str>,
    leftmost: Vec<usize>,
}

impl<'a> Postorder<'a> {
    fn new(tree: Option<&'a LabeledTree>) -> Self {
        let mut p = Postorder { labels: Vec::new(), leftmost: Vec::new() };
        if let Some(tree) = tree {
            // iterative postorder to survive deep syntax trees
            let mut stack: Vec<(&LabeledTree, usize, Option<usize>)> = vec![(tree, 0, None)];
            while let Some((node, child, first_leaf)) = stack.pop() {
                if child < node.children.len() {
                    stack.push((node, child + 1, first_leaf));
                    stack.push((&node.children[child], 0, None));
                    continue;
                }
                let idx = p.labels.len();
                let leftmost = if node.children.is_empty() { idx } else { first_leaf.expect("visited children") };
                p.labels.push(&node.label);
                p.leftmost.push(leftmost);
                if let Some(parent) = stack.last_mut() {
                    // record the leftmost leaf of the first child on its parent
                    if parent.2.is_none() {
                        parent.2 = Some(leftmost);
                    }
                }
            }
        }
        p
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    /// Nodes with no ancestor sharing their leftmost leaf, ascending.
    fn keyroots(&self) -> Vec<usize> {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut roots = Vec::new();
        for i in (0..n).rev() {
            let l = self.leftmost[i];
            if !seen[l] {
                seen[l] = true;
                roots.push(i);
            }
        }
        roots.reverse();
        roots
    }
}

/// Minimum number of unit-cost insert, delete and relabel operations turning
/// `a` into `b`. `None` stands for the empty tree.
pub fn tree_edit_distance(a: Option<&LabeledTree>, b: Option<&LabeledTree>) -> usize {
    let ta = Postorder::new(a);
    let tb = Postorder::new(b);
    let (n, m) = (ta.len(), tb.len());
    if n == 0 || m == 0 {
        return n.max(m);
    }

    let mut treedist = vec![0u32; n * m];
    let mut forest = vec![0u32; (n + 1) * (m + 1)];
    let kr_a = ta.keyroots();
    let kr_b = tb.keyroots();

    for &i in &kr_a {
        for &j in &kr_b {
            let li = ta.leftmost[i];
            let lj = tb.leftmost[j];
            let rows = i - li + 2;
            let cols = j - lj + 2;
            let at = |x: usize, y: usize| x * cols + y;

            forest[at(0, 0)] = 0;
            for x in 1..rows {
                forest[at(x, 0)] = forest[at(x - 1, 0)] + 1;
            }
            for y in 1..cols {
                forest[at(0, y)] = forest[at(0, y - 1)] + 1;
            }
            for x in li..=i {
                let dx = x - li + 1;
                for y in lj..=j {
                    let dy = y - lj + 1;
                    let delete = forest[at(dx - 1, dy)] + 1;
                    let insert = forest[at(dx, dy - 1)] + 1;
                    if ta.leftmost[x] == li && tb.leftmost[y] == lj {
                        let relabel = forest[at(dx - 1, dy - 1)] + u32::from(ta.labels[x] != tb.labels[y]);
                        let d = delete.min(insert).min(relabel);
                        forest[at(dx, dy)] = d;
                        treedist[x * m + y] = d;
                    } else {
                        let p = ta.leftmost[x] - li;
                        let q = tb.leftmost[y] - lj;
                        let subtree = forest[at(p, q)] + treedist[x * m + y];
                        forest[at(dx, dy)] = delete.min(insert).min(subtree);
                    }
                }
            }
        }
    }
    treedist[(n - 1) * m + (m - 1)] as usize
}

/// Raw distance and distance divided by the larger tree's node count.
pub fn normalized_tree_distance(a: &LabeledTree, b: &LabeledTree) -> (usize, f64) {
    let raw = tree_edit_distance(Some(a), Some(b));
    let denom = a.size().max(b.size());
    (raw, raw as f64 / denom as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(label: &str, children: Vec<LabeledTree>) -> LabeledTree {
        LabeledTree::new(label, children)
    }
    fn l(label: &str) -> LabeledTree {
        LabeledTree::leaf(label)
    }

    #[test]
    fn identical_is_zero() {
        let a = t("f", vec![t("a", vec![l("b")]), l("c")]);
        assert_eq!(tree_edit_distance(Some(&a), Some(&a.clone())), 0);
        assert_eq!(normalized_tree_distance(&a, &a), (0, 0.0));
    }

    #[test]
    fn against_empty_tree() {
        let a = t("f", vec![t("a", vec![l("b")]), l("c")]);
        assert_eq!(tree_edit_distance(Some(&a), None), 4);
        assert_eq!(tree_edit_distance(None, Some(&a)), 4);
        assert_eq!(tree_edit_distance(None, None), 0);
    }

    #[test]
    fn classic_example() {
        // Zhang & Shasha's worked example: f(d(a, c(b)), e) vs f(c(d(a, b)), e) = 2
        let a = t("f", vec![t("d", vec![l("a"), t("c", vec![l("b")])]), l("e")]);
        let b = t("f", vec![t("c", vec![t("d", vec![l("a"), l("b")])]), l("e")]);
        assert_eq!(tree_edit_distance(Some(&a), Some(&b)), 2);
    }

    #[test]
    fn relabel_and_insert() {
        let a = t("a", vec![l("b"), l("c")]);
        let b = t("a", vec![l("b"), l("x")]);
        assert_eq!(tree_edit_distance(Some(&a), Some(&b)), 1);
        let c = t("a", vec![t("n", vec![l("b"), l("c")])]);
        assert_eq!(tree_edit_distance(Some(&a), Some(&c)), 1);
    }

    #[test]
    fn deep_chain_does_not_overflow_stack() {
        let mut tree = l("x");
        for _ in 0..20_000 {
            tree = t("y", vec![tree]);
        }
        let p = Postorder::new(Some(&tree));
        assert_eq!(p.len(), 20_001);
        assert_eq!(p.keyroots(), vec![20_000]);
        std::mem::forget(tree); // recursive Drop would overflow in test threads
    }
}
