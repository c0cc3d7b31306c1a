use nwlab_core::suite::{check_op, OPS, TOLERANCE};

#[test]
fn every_op_passes_twenty_cases() {
    for op in OPS {
        let r = check_op(op, 20, 17).unwrap();
        println!("{op:24} max rel err {:.3e} (case {})", r.max_rel_error, r.worst_case);
        assert!(r.max_rel_error < TOLERANCE, "{op}: {r:?}");
    }
}
