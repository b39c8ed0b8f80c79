//! Small hand-built grammars with known probabilities.

use autodiff::Array;

use crate::grammar::{DensePcfg, TdPcfg};

/// One nonterminal `N`, one preterminal `T`, words `a`=0 and `b`=1:
/// `N -> N N` 0.2, `N -> N T` 0.3, `N -> T N` 0.1, `N -> T T` 0.4,
/// `T -> a` 0.6, `T -> b` 0.4.
pub fn g2() -> DensePcfg {
    DensePcfg::new(1, 1, vec![0.2, 0.3, 0.1, 0.4], Array::row(vec![0.6, 0.4]).unwrap(), Array::scalar(1.0)).unwrap()
}

/// [`g2`] in Kruskal form: one rank-1 term per rule, `d = 4`.
pub fn g2_factored() -> TdPcfg {
    let (nn, tt) = (1.0, 0.0);
    TdPcfg::new(
        Array::row(vec![0.2, 0.3, 0.1, 0.4]).unwrap(),
        // columns: B of each rule (N, N, T, T)
        Array::new(2, 4, vec![nn, nn, tt, tt, tt, tt, nn, nn]).unwrap(),
        // columns: C of each rule (N, T, N, T)
        Array::new(2, 4, vec![nn, tt, nn, tt, tt, nn, tt, nn]).unwrap(),
        Array::row(vec![0.6, 0.4]).unwrap(),
        Array::scalar(1.0),
    )
    .unwrap()
}

/// `N -> T T` with probability 1, `T -> a` with probability 1.
pub fn single_parse() -> DensePcfg {
    DensePcfg::new(1, 1, vec![0.0, 0.0, 0.0, 1.0], Array::scalar(1.0), Array::scalar(1.0)).unwrap()
}

/// [`single_parse`] in Kruskal form (`d = 1`).
pub fn single_parse_factored() -> TdPcfg {
    TdPcfg::new(
        Array::scalar(1.0),
        Array::column(vec![0.0, 1.0]).unwrap(),
        Array::column(vec![0.0, 1.0]).unwrap(),
        Array::scalar(1.0),
        Array::scalar(1.0),
    )
    .unwrap()
}
