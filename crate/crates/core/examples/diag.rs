use normint_core::field::SdfField;
use normint_core::Vec3;

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let field = SdfField::load(std::path::Path::new(&path)).unwrap();
    println!("sharpness = {:.2}", field.sharpness());
    // locate the zero crossing along several directions
    for dir in [Vec3::x(), Vec3::y(), Vec3::z(), Vec3::new(0.577,0.577,0.577), Vec3::new(-0.707,0.707,0.0)] {
        let mut lo = 0.2f64;
        let mut hi = 0.9f64;
        for _ in 0..40 {
            let mid = 0.5*(lo+hi);
            if field.sdf(&(dir*mid)).unwrap() < 0.0 { lo = mid } else { hi = mid }
        }
        print!("r0[{:+.2},{:+.2},{:+.2}]={:.4}  ", dir.x, dir.y, dir.z, 0.5*(lo+hi));
    }
    println!();
    let mut sum = 0.0;
    let mut sum_signed = 0.0;
    let n = 2000;
    for i in 0..n {
        let t = i as f64 / n as f64;
        let z = 1.0 - 2.0 * t;
        let rho = (1.0f64 - z * z).sqrt();
        let phi = 2.64 * i as f64;
        let p = Vec3::new(rho * phi.cos(), rho * phi.sin(), z) * 0.5;
        let f = field.sdf(&p).unwrap();
        sum += f.abs();
        sum_signed += f;
    }
    println!("on true surface: mean|f|={:.5} mean f={:.5}", sum / n as f64, sum_signed / n as f64);
}
