//! One oscillometric run, tick by tick, against a synthetic cuff whose
//! true systolic, diastolic and heart rate are known.

use umphcs::biosim::{CuffModule, CuffRunParams};
use umphcs::session::{open_hub, BpConfig, BpRun, RunOptions, Tick};

fn main() {
    let params = CuffRunParams { map_true: 95.0, sigma: 12.0, heart_rate_hz: 1.1, noise_sd: 0.2, seed: 5, ..Default::default() };
    println!(
        "truth: SP {:.1}  DP {:.1}  HR {:.1}",
        params.sp_true(),
        params.dp_true(),
        params.hr_bpm_true()
    );

    let hub = open_hub(Box::new(CuffModule::new(params).unwrap()), &RunOptions::default());
    let mut run = BpRun::new(hub, BpConfig::default());
    let mut next_print = 0.0;
    loop {
        match run.step().unwrap() {
            Tick::Sample(s) if s.t_s >= next_print => {
                println!("t {:5.1} s  cuff {:6.1} mmHg  ow {:+.2}", s.t_s, s.cuff_mmhg, s.ow);
                next_print += 5.0;
            }
            Tick::Done => break,
            _ => {}
        }
    }
    let out = run.finish().unwrap();
    let r = out.result;
    println!(
        "estimate: SP {:.1}  DP {:.1}  MAP {:.1}  HR {:.1}  ({} ticks, {} samples)",
        r.systolic, r.diastolic, r.map, r.heart_rate, out.stats.ticks, out.stats.samples
    );
}
