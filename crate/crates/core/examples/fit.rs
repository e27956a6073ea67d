use tnnsim_core::pcsa::*;
fn main() {
    let cal = calibrate(&near_threshold_anchors(), FreeParams::DEFAULT, &PcsaParams::near_threshold()).unwrap();
    println!("{:?}\n{}", cal.params, cal.report());
    let p = cal.params;
    for (a, b) in [(20e3, 350e3), (30e3, 100e3), (60e3, 100e3), (80e3, 100e3), (100e3, 110e3), (100e3, 1e6), (100e3,350e3)] {
        println!("{a} {b} {}", switching_time(a, b, &p).unwrap() * 1e9);
    }
}
