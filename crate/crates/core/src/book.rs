#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}
#[doc = include_str!("../../../book/src/numerics.md")]
mod numerics {}
#[doc = include_str!("../../../book/src/corpus.md")]
mod corpus {}
#[doc = include_str!("../../../book/src/cpc.md")]
mod cpc {}
#[doc = include_str!("../../../book/src/curriculum.md")]
mod curriculum {}
#[doc = include_str!("../../../book/src/grounding.md")]
mod grounding {}
#[doc = include_str!("../../../book/src/experiments.md")]
mod experiments {}
