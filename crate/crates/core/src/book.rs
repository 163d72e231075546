#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}
#[doc = include_str!("../../../book/src/windowing.md")]
mod windowing {}
#[doc = include_str!("../../../book/src/models.md")]
mod models {}
#[doc = include_str!("../../../book/src/optimizers.md")]
mod optimizers {}
#[doc = include_str!("../../../book/src/meta.md")]
mod meta {}
#[doc = include_str!("../../../book/src/online.md")]
mod online {}
#[doc = include_str!("../../../book/src/datasets.md")]
mod datasets {}
#[doc = include_str!("../../../book/src/experiments.md")]
mod experiments {}
#[doc = include_str!("../../../book/src/cli.md")]
mod cli {}
