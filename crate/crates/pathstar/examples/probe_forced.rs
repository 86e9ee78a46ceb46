//! Scratch diagnostic: what does a trained checkpoint emit when the first
//! hop is forced onto each arm? Prints the decoded continuation next to the
//! forced arm's true continuation and the goal arm's continuation.

use pathstar::checkpoint;
use pathstar::data::{read_lines, Topology};
use pathstar::tokenizer::{encode, Vocab};
use std::path::Path;

fn main() {
    let dir = Path::new("runs/desk-g2l5-tf");
    let ckpt = checkpoint::load(&dir.join("checkpoint.ckpt")).unwrap();
    let topo = Topology { d: 2, l: 5, n_labels: 50 };
    let vocab = Vocab::new(50);
    let graphs = read_lines(&dir.join("test.txt"), &topo).unwrap();

    for g in graphs.iter().take(4) {
        let seq = encode(g, &vocab).unwrap();
        println!(
            "center {:>2}  goal_arm {}  arms {:?}",
            g.center, g.goal_arm, g.arms
        );
        for arm in 0..topo.d {
            let mut ctx = seq.prefix().to_vec();
            ctx.push(g.center);
            ctx.push(g.arms[arm][0]);
            let mut emitted = Vec::new();
            for _ in 0..topo.l - 2 {
                let probs = ckpt.model.next_token_distribution(&ctx).unwrap();
                let tok = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0 as u16;
                ctx.push(tok);
                emitted.push(tok);
            }
            let decoded: Vec<String> = emitted.iter().map(|&t| vocab.describe(t)).collect();
            println!(
                "  forced arm {arm} (first hop {}): emitted {:?}  (arm rest {:?})",
                g.arms[arm][0],
                decoded,
                &g.arms[arm][1..],
            );
        }
    }
}
