//! VGG-16 and VGG-19: plain stacks of biased 3x3 convolutions with
//! max pooling between blocks.

use super::{conv, max_pool, relu};
use crate::nn::{GraphBuilder, NnError, NodeId, Padding};

const FILTERS: [usize; 5] = [64, 128, 256, 512, 512];

pub(super) fn build(
    b: &mut GraphBuilder,
    input: NodeId,
    convs_per_block: &[usize; 5],
) -> Result<NodeId, NnError> {
    let mut x = input;
    for (block, (&n_convs, &filters)) in convs_per_block.iter().zip(FILTERS.iter()).enumerate() {
        let block = block + 1;
        for i in 1..=n_convs {
            let name = format!("block{block}_conv{i}");
            x = conv(b, &name, x, filters, (3, 3), (1, 1), Padding::Same, true)?;
            x = relu(b, &format!("{name}_relu"), x)?;
        }
        x = max_pool(
            b,
            &format!("block{block}_pool"),
            x,
            (2, 2),
            (2, 2),
            Padding::Valid,
        )?;
    }
    Ok(x)
}
