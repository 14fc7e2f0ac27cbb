#![no_main]

use deepcpg::checkpoint::{self, Record};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(rec) = Record::decode(data) else { return };
    // decoding is canonical
    assert_eq!(rec.encode(), data);
    let Ok(run) = checkpoint::config(&rec) else { return };
    // valid but huge networks would only exercise the allocator
    let n = &run.network;
    let widths = n.actor_hidden.iter().chain(&n.critic_hidden).chain([&n.head_hidden]);
    if widths.copied().any(|w| w > 1024) || run.env.joints() > 64 || run.train.tau_o * run.train.tau_c > 4096 {
        return;
    }
    let _ = checkpoint::load_policy(&rec);
    let _ = checkpoint::load_trainer(&rec);
});
