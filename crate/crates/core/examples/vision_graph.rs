//! Vision graph over patch embeddings: symmetric k-NN edges, a virtual node
//! joined to every patch, the normalized operator and Chebyshev convolution.

use multifusion::diffcore::Tensor;
use multifusion::nn::{self, uniform};
use multifusion::visiongraph::{augment_virtual_node, build_knn_graph, cheb_conv, normalized_operator, Adjacency, ChebFilterBank};

fn main() -> multifusion::Result<()> {
    // Three collinear points: 0 and 1 are close, 2 is far from both.
    let line = Tensor::<f64>::from_f64([3, 1], &[0.0, 1.0, 5.0])?;
    println!("1-NN edges of {{0, 1, 5}}: {:?}", build_knn_graph(&line, 1)?.edges());

    let pair = Adjacency::from_dense(&[vec![0, 1], vec![1, 0]])?;
    let l: Tensor<f64> = normalized_operator(&pair)?;
    println!("operator of a single edge: {:?}", l.data());

    let mut r = nn::rng(5);
    let x: Tensor<f64> = uniform(&mut r, &[9, 4], 1.0);
    let vn: Tensor<f64> = uniform(&mut r, &[1, 4], 1.0);
    let graph = augment_virtual_node(&build_knn_graph(&x, 2)?, &x, &vn, 2)?;
    println!(
        "9 patches + virtual node: {} nodes, {} edges, virtual degree {}",
        graph.adjacency.len(),
        graph.adjacency.edges().len(),
        graph.adjacency.degree(9)
    );
    let bank = ChebFilterBank::init(&mut r, 3, 4)?;
    let e = cheb_conv(&graph, &bank)?;
    println!("Chebyshev order 3 output {:?}; virtual-node row {:?}", e.shape(), e.row_slice(9));
    Ok(())
}
