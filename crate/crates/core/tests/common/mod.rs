#![allow(dead_code)]

use relmc_core::model::{parse_model, RmdpModel, BLOCKS_WORLD};
use relmc_core::syntax::parse_conjunction;
use relmc_core::term::{Conjunction, Sym};

pub fn blocks() -> RmdpModel {
    parse_model(BLOCKS_WORLD).unwrap()
}

pub fn model_file(name: &str) -> RmdpModel {
    let path = format!("{}/../../models/{name}", env!("CARGO_MANIFEST_DIR"));
    parse_model(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn conj(text: &str) -> Conjunction {
    parse_conjunction(text).unwrap()
}

pub fn syms(names: &[&str]) -> Vec<Sym> {
    names.iter().map(|n| Sym::intern(n)).collect()
}

pub fn letters(n: usize) -> Vec<Sym> {
    syms(&["a", "b", "c", "d", "e", "f"][..n])
}

/// Ground state from a list of towers, each listed bottom to top.
pub fn towers(stacks: &[&[&str]]) -> Conjunction {
    let mut atoms = Vec::new();
    for st in stacks {
        for w in st.windows(2) {
            atoms.push(format!("on({},{})", w[1], w[0]));
        }
        atoms.push(format!("cl({})", st.last().unwrap()));
    }
    conj(&atoms.join(","))
}
