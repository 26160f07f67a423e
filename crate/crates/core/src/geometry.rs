//! Nested uniform triangulations, element patches and node supports.
//!
//! Meshes are conforming P1 triangulations with counterclockwise elements.
//! Nodes are numbered row-major by coordinates, so a refined mesh and a
//! directly built mesh of the same resolution share their node numbering.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// A conforming triangulation.
#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<Point>,
    elements: Vec<[usize; 3]>,
    interior_nodes: Vec<usize>,
    interior_index: Vec<Option<usize>>,
    mesh_size: f64,
    node_element_offsets: Vec<usize>,
    node_element_list: Vec<usize>,
}

fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl Mesh {
    /// Builds a mesh from raw parts, checking orientation and deriving the
    /// boundary from edges owned by a single element.
    pub fn from_parts(nodes: Vec<Point>, elements: Vec<[usize; 3]>) -> Result<Self> {
        let mut mesh_size: f64 = 0.0;
        for (e, tri) in elements.iter().enumerate() {
            if tri.iter().any(|&v| v >= nodes.len()) {
                return Err(Error::InvalidArgument(format!(
                    "element {e} references a missing node"
                )));
            }
            let [a, b, c] = tri.map(|v| nodes[v]);
            if signed_area(a, b, c) <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "element {e} is degenerate or clockwise"
                )));
            }
            mesh_size = mesh_size
                .max(distance(a, b))
                .max(distance(b, c))
                .max(distance(c, a));
        }

        let mut counts = vec![0usize; nodes.len() + 1];
        for tri in &elements {
            for &v in tri {
                counts[v + 1] += 1;
            }
        }
        for i in 0..nodes.len() {
            counts[i + 1] += counts[i];
        }
        let node_element_offsets = counts.clone();
        let mut fill = counts;
        let mut node_element_list = vec![0usize; node_element_offsets[nodes.len()]];
        for (e, tri) in elements.iter().enumerate() {
            for &v in tri {
                node_element_list[fill[v]] = e;
                fill[v] += 1;
            }
        }

        let mut edge_count: HashMap<(usize, usize), u32> = HashMap::new();
        for tri in &elements {
            for i in 0..3 {
                let (a, b) = (tri[i], tri[(i + 1) % 3]);
                *edge_count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut boundary = vec![false; nodes.len()];
        for (&(a, b), &count) in &edge_count {
            if count == 1 {
                boundary[a] = true;
                boundary[b] = true;
            }
        }
        let mut interior_nodes = Vec::new();
        let mut interior_index = vec![None; nodes.len()];
        for (v, &on_boundary) in boundary.iter().enumerate() {
            if !on_boundary && node_element_offsets[v + 1] > node_element_offsets[v] {
                interior_index[v] = Some(interior_nodes.len());
                interior_nodes.push(v);
            }
        }

        Ok(Mesh {
            nodes,
            elements,
            interior_nodes,
            interior_index,
            mesh_size,
            node_element_offsets,
            node_element_list,
        })
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    /// Node indices not on the domain boundary, ascending.
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior_nodes
    }

    /// Position of `node` within [`Mesh::interior_nodes`].
    pub fn interior_index(&self, node: usize) -> Option<usize> {
        self.interior_index[node]
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.interior_index[node].is_none()
    }

    /// Largest element diameter.
    pub fn mesh_size(&self) -> f64 {
        self.mesh_size
    }

    /// Elements having `node` as a vertex, ascending.
    pub fn elements_of_node(&self, node: usize) -> &[usize] {
        &self.node_element_list[self.node_element_offsets[node]..self.node_element_offsets[node + 1]]
    }

    pub fn vertices(&self, element: usize) -> [Point; 3] {
        self.elements[element].map(|v| self.nodes[v])
    }

    pub fn area(&self, element: usize) -> f64 {
        let [a, b, c] = self.vertices(element);
        signed_area(a, b, c)
    }

    pub fn barycenter(&self, element: usize) -> Point {
        let [a, b, c] = self.vertices(element);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Barycentric coordinates of `p` with respect to `element`.
    pub fn barycentric(&self, element: usize, p: Point) -> [f64; 3] {
        let [a, b, c] = self.vertices(element);
        let total = signed_area(a, b, c);
        [
            signed_area(p, b, c) / total,
            signed_area(a, p, c) / total,
            signed_area(a, b, p) / total,
        ]
    }
}

/// Uniform triangulation of the square `[origin, origin + side]²` with `n`
/// cells per direction, each cell cut along its rising diagonal.
pub fn build_unit_square_mesh(n: usize, origin: Point, side: f64) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::InvalidArgument("subdivision count must be positive".into()));
    }
    if !(side > 0.0) {
        return Err(Error::InvalidArgument("side length must be positive".into()));
    }
    let step = side / n as f64;
    let mut nodes = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            nodes.push([origin[0] + i as f64 * step, origin[1] + j as f64 * step]);
        }
    }
    let id = |i: usize, j: usize| j * (n + 1) + i;
    let mut elements = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            elements.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            elements.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    Mesh::from_parts(nodes, elements)
}

fn row_major_order(nodes: &[Point]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| {
        nodes[a][1]
            .total_cmp(&nodes[b][1])
            .then(nodes[a][0].total_cmp(&nodes[b][0]))
    });
    order
}

/// One red refinement step. Returns the refined mesh, the parent of each
/// child element, and the new index of every old node.
fn red_refine(mesh: &Mesh) -> Result<(Mesh, Vec<usize>, Vec<usize>)> {
    let mut nodes = mesh.nodes.clone();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mid = |a: usize, b: usize, nodes: &mut Vec<Point>| -> usize {
        *midpoint.entry((a.min(b), a.max(b))).or_insert_with(|| {
            let (pa, pb) = (nodes[a], nodes[b]);
            nodes.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
            nodes.len() - 1
        })
    };
    let mut elements = Vec::with_capacity(4 * mesh.elements.len());
    let mut parent = Vec::with_capacity(4 * mesh.elements.len());
    for (e, &[a, b, c]) in mesh.elements.iter().enumerate() {
        let ab = mid(a, b, &mut nodes);
        let bc = mid(b, c, &mut nodes);
        let ca = mid(c, a, &mut nodes);
        elements.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        parent.extend_from_slice(&[e; 4]);
    }
    let order = row_major_order(&nodes);
    let mut renumber = vec![0usize; nodes.len()];
    for (new, &old) in order.iter().enumerate() {
        renumber[old] = new;
    }
    let sorted_nodes = order.iter().map(|&old| nodes[old]).collect();
    for tri in &mut elements {
        *tri = tri.map(|v| renumber[v]);
    }
    let old_map = renumber[..mesh.nodes.len()].to_vec();
    Ok((Mesh::from_parts(sorted_nodes, elements)?, parent, old_map))
}

/// A coarse mesh together with a nested fine mesh.
#[derive(Debug, Clone)]
pub struct MeshHierarchy {
    coarse: Mesh,
    fine: Mesh,
    levels: usize,
    fine_to_coarse_element: Vec<usize>,
    coarse_node_in_fine: Vec<usize>,
    child_offsets: Vec<usize>,
    child_list: Vec<usize>,
}

/// Refines `mesh` uniformly `levels` times, each triangle into four
/// congruent children.
pub fn refine_uniform(mesh: &Mesh, levels: usize) -> Result<MeshHierarchy> {
    let mut fine = mesh.clone();
    let mut to_coarse: Vec<usize> = (0..mesh.element_count()).collect();
    let mut node_map: Vec<usize> = (0..mesh.node_count()).collect();
    for _ in 0..levels {
        let (next, parent, renumber) = red_refine(&fine)?;
        to_coarse = parent.iter().map(|&p| to_coarse[p]).collect();
        node_map = node_map.iter().map(|&v| renumber[v]).collect();
        fine = next;
    }
    let mut child_offsets = vec![0usize; mesh.element_count() + 1];
    for &c in &to_coarse {
        child_offsets[c + 1] += 1;
    }
    for i in 0..mesh.element_count() {
        child_offsets[i + 1] += child_offsets[i];
    }
    let mut fill = child_offsets.clone();
    let mut child_list = vec![0usize; to_coarse.len()];
    for (f, &c) in to_coarse.iter().enumerate() {
        child_list[fill[c]] = f;
        fill[c] += 1;
    }
    Ok(MeshHierarchy {
        coarse: mesh.clone(),
        fine,
        levels,
        fine_to_coarse_element: to_coarse,
        coarse_node_in_fine: node_map,
        child_offsets,
        child_list,
    })
}

impl MeshHierarchy {
    /// Uniform mesh of the unit square with `n_coarse` cells per direction,
    /// refined `levels` times.
    pub fn unit_square(n_coarse: usize, levels: usize) -> Result<Self> {
        refine_uniform(&build_unit_square_mesh(n_coarse, [0.0, 0.0], 1.0)?, levels)
    }

    pub fn coarse(&self) -> &Mesh {
        &self.coarse
    }

    pub fn fine(&self) -> &Mesh {
        &self.fine
    }

    pub fn refinement_levels(&self) -> usize {
        self.levels
    }

    pub fn fine_to_coarse_element(&self) -> &[usize] {
        &self.fine_to_coarse_element
    }

    pub fn coarse_node_in_fine(&self) -> &[usize] {
        &self.coarse_node_in_fine
    }

    /// Fine elements contained in a coarse element, ascending.
    pub fn fine_elements_of(&self, coarse_element: usize) -> &[usize] {
        &self.child_list[self.child_offsets[coarse_element]..self.child_offsets[coarse_element + 1]]
    }
}

/// The center of a patch: a coarse element for `U_k(K)`, a coarse node for
/// the union over its support.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchCenter {
    Element(usize),
    Node(usize),
}

/// A union of coarse elements together with its fine interior.
#[derive(Debug, Clone)]
pub struct Patch {
    pub center: PatchCenter,
    pub k: usize,
    /// Coarse elements, ascending.
    pub coarse_elements: Vec<usize>,
    /// Fine elements inside the coarse elements, ascending.
    pub fine_elements: Vec<usize>,
    /// Fine nodes whose whole support lies in the patch and which are not on
    /// the domain boundary, ascending.
    pub fine_interior_nodes: Vec<usize>,
    /// Coarse nodes interior to the patch in the same sense, ascending.
    pub coarse_interior_nodes: Vec<usize>,
}

fn interior_of(mesh: &Mesh, inside: &[bool], elements: &[usize]) -> Vec<usize> {
    let mut nodes: Vec<usize> = elements
        .iter()
        .flat_map(|&e| mesh.elements()[e])
        .filter(|&v| !mesh.is_boundary(v) && mesh.elements_of_node(v).iter().all(|&e| inside[e]))
        .collect();
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

impl Patch {
    fn from_coarse_elements(
        hier: &MeshHierarchy,
        center: PatchCenter,
        k: usize,
        mut coarse_elements: Vec<usize>,
    ) -> Self {
        coarse_elements.sort_unstable();
        coarse_elements.dedup();
        let mut coarse_inside = vec![false; hier.coarse.element_count()];
        let mut fine_inside = vec![false; hier.fine.element_count()];
        let mut fine_elements = Vec::new();
        for &c in &coarse_elements {
            coarse_inside[c] = true;
            for &f in hier.fine_elements_of(c) {
                fine_inside[f] = true;
                fine_elements.push(f);
            }
        }
        fine_elements.sort_unstable();
        Patch {
            center,
            k,
            fine_interior_nodes: interior_of(&hier.fine, &fine_inside, &fine_elements),
            coarse_interior_nodes: interior_of(&hier.coarse, &coarse_inside, &coarse_elements),
            coarse_elements,
            fine_elements,
        }
    }

    pub fn contains_coarse_element(&self, element: usize) -> bool {
        self.coarse_elements.binary_search(&element).is_ok()
    }
}

/// Grows a set of coarse elements `k` times by vertex adjacency.
fn vertex_closure(mesh: &Mesh, seed: &[usize], k: usize) -> Vec<usize> {
    let mut inside = vec![false; mesh.element_count()];
    let mut current: Vec<usize> = seed.to_vec();
    for &e in &current {
        inside[e] = true;
    }
    for _ in 0..k {
        let mut added = Vec::new();
        for &e in &current {
            for &v in &mesh.elements()[e] {
                for &other in mesh.elements_of_node(v) {
                    if !inside[other] {
                        inside[other] = true;
                        added.push(other);
                    }
                }
            }
        }
        if added.is_empty() {
            break;
        }
        current.extend(added);
    }
    current
}

/// The patch `U_k(K)` around coarse element `element`.
pub fn element_patch(hier: &MeshHierarchy, element: usize, k: usize) -> Result<Patch> {
    if element >= hier.coarse.element_count() {
        return Err(Error::InvalidArgument(format!("coarse element {element} out of range")));
    }
    let coarse = vertex_closure(&hier.coarse, &[element], k);
    Ok(Patch::from_coarse_elements(hier, PatchCenter::Element(element), k, coarse))
}

/// Elements having the interior node `node` as a vertex.
pub fn node_support(mesh: &Mesh, node: usize) -> Result<Vec<usize>> {
    if node >= mesh.node_count() {
        return Err(Error::InvalidArgument(format!("node {node} out of range")));
    }
    if mesh.is_boundary(node) {
        return Err(Error::InvalidArgument(format!("node {node} lies on the boundary")));
    }
    Ok(mesh.elements_of_node(node).to_vec())
}

/// The union of `U_k(K)` over all coarse elements `K` in the support of the
/// interior coarse node `node`.
pub fn node_patch_union(hier: &MeshHierarchy, node: usize, k: usize) -> Result<Patch> {
    let support = node_support(&hier.coarse, node)?;
    let coarse = vertex_closure(&hier.coarse, &support, k);
    Ok(Patch::from_coarse_elements(hier, PatchCenter::Node(node), k, coarse))
}
