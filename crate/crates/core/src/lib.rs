//! Key-patch selection: pick the budgeted subset of image patches from which
//! a reconstruction oracle best recovers the whole image.
//!
//! * [`patch_grid`]: image loading, resizing and the patch grid.
//! * [`oracle`]: reconstruction oracles and the masked / full-image losses.
//! * [`selector`]: the greedy selector, its lazy variant and the random baseline.
//! * [`submodular_lab`]: diminishing-returns checks and greedy-vs-optimum bounds.
//! * [`oracle_client`]: HTTP client for remote reconstruction services.
//! * [`harness`]: corpora, loss-curve sweeps, ablations, CSV and SVG output.
//! * [`cli`]: the `kpp` command line.

pub mod cli;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod oracle_client;
pub mod patch_grid;
pub mod selector;
pub mod submodular_lab;

pub use error::{KppError, Result};
pub use oracle::{full_mse, masked_mse, Idw, MeanFill, Oracle, PatchSet, Reconstruction};
pub use patch_grid::{assemble, central_index, load_and_resize, split, GridSpec, ImageTensor, PatchArray, PatchIndex};
pub use selector::{kpp_greedy, lazy_greedy, random_select, resolve_budget, Budget, InitPolicy, SelectionTrace};
