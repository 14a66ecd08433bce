//! Pixel-level RGB-D fusion: DMF, Conv1E weight augmentation, and the
//! HSV-based HSD / RGBD images.

use crate::error::{Error, Result};
use crate::nn::{Conv, Fx, Scope};
use crate::tensor::{Padding, Real, Tensor, Var};

/// RGB `[B,H,W,3]` with its depth map `[B,H,W,1]`, both in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct RgbdStack<T> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
}

impl<T: Real> RgbdStack<T> {
    pub fn new(rgb: Tensor<T>, depth: Tensor<T>) -> Result<Self> {
        let (sr, sd) = (rgb.shape(), depth.shape());
        if sr.len() != 4 || sd.len() != 4 || sr[3] != 3 || sd[3] != 1 || sr[..3] != sd[..3] {
            return Err(Error::shape(
                "rgbd_stack",
                format!("rgb {sr:?} and depth {sd:?} must be [B,H,W,3] / [B,H,W,1]"),
            ));
        }
        let in_range = |t: &Tensor<T>| {
            t.data()
                .iter()
                .all(|v| (T::zero()..=T::one()).contains(v))
        };
        if !in_range(&rgb) || !in_range(&depth) {
            return Err(Error::Data("rgb and depth values must lie in [0, 1]".into()));
        }
        Ok(Self { rgb, depth })
    }
}

fn map_pixels<T: Real>(t: &Tensor<T>, f: impl Fn([T; 3]) -> [T; 3]) -> Tensor<T> {
    let mut out = t.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let r = f([px[0], px[1], px[2]]);
        px.copy_from_slice(&r);
    }
    out
}

fn hsv_of<T: Real>([r, g, b]: [T; 3]) -> [T; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > T::zero() { delta / max } else { T::zero() };
    if delta == T::zero() {
        return [T::zero(), s, max];
    }
    let six = T::of(6.0);
    let mut h = if max == r {
        (g - b) / delta
    } else if max == g {
        (b - r) / delta + T::of(2.0)
    } else {
        (r - g) / delta + T::of(4.0)
    };
    if h < T::zero() {
        h += six;
    }
    let mut h = h / six;
    if h >= T::one() {
        h -= T::one();
    }
    [h, s, max]
}

fn rgb_of<T: Real>([h, s, v]: [T; 3]) -> [T; 3] {
    let h6 = h * T::of(6.0);
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (T::one() - s);
    let q = v * (T::one() - s * f);
    let t = v * (T::one() - s * (T::one() - f));
    match sector.as_f64() as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hexagonal HSV with hue normalized to `[0, 1)`. Achromatic pixels get H = S = 0.
pub fn rgb_to_hsv<T: Real>(rgb: &Tensor<T>) -> Tensor<T> {
    map_pixels(rgb, hsv_of)
}

pub fn hsv_to_rgb<T: Real>(hsv: &Tensor<T>) -> Tensor<T> {
    map_pixels(hsv, rgb_of)
}

/// HSV of the RGB image with the V channel replaced by depth.
pub fn make_hsd<T: Real>(stack: &RgbdStack<T>) -> Tensor<T> {
    let mut hsv = rgb_to_hsv(&stack.rgb);
    for (px, &d) in hsv.data_mut().chunks_exact_mut(3).zip(stack.depth.data()) {
        px[2] = d;
    }
    hsv
}

/// The HSD image mapped back to RGB space.
pub fn make_rgbd_image<T: Real>(stack: &RgbdStack<T>) -> Tensor<T> {
    hsv_to_rgb(&make_hsd(stack))
}

/// Extends `[k,k,3,C]` first-conv weights to `[k,k,4,C]` with a zero depth slice.
pub fn conv1e_augment<T: Real>(weights3: &Tensor<T>) -> Result<Tensor<T>> {
    let [k1, k2, 3, c] = weights3.shape()[..] else {
        return Err(Error::shape(
            "conv1e_augment",
            format!("weights must be [k,k,3,C], got {:?}", weights3.shape()),
        ));
    };
    let mut out = Vec::with_capacity(k1 * k2 * 4 * c);
    for tap in weights3.data().chunks_exact(3 * c) {
        out.extend_from_slice(tap);
        out.extend(std::iter::repeat_n(T::zero(), c));
    }
    Tensor::new(vec![k1, k2, 4, c], out)
}

/// Trainable 1×1 convolution + ReLU from concatenated RGB-D to 3 channels.
#[derive(Clone, Debug)]
pub struct Dmf {
    pub conv: Conv,
}

impl Dmf {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, name: &str) -> Result<Self> {
        let mut g = s.group("dmf");
        Ok(Self {
            conv: Conv::new(&mut g, name, 4, 3, 1, 1, Padding::Symmetric(0))?,
        })
    }

    pub fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, rgb: Var, depth: Var) -> Result<Var> {
        let x = fx.tape.concat(&[rgb, depth], 3)?;
        let y = self.conv.forward(fx, x)?;
        Ok(fx.tape.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(v: [f64; 3]) -> Tensor<f64> {
        Tensor::from_f64(vec![1, 1, 1, 3], &v).unwrap()
    }

    #[test]
    fn hsv_closed_forms() {
        assert_eq!(rgb_to_hsv(&px([1.0, 0.0, 0.0])).data(), &[0.0, 1.0, 1.0]);
        assert_eq!(rgb_to_hsv(&px([0.5, 0.5, 0.5])).data(), &[0.0, 0.0, 0.5]);
        let blue = rgb_to_hsv(&px([0.0, 0.0, 1.0]));
        assert!((blue.data()[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hsd_and_rgbd_of_pure_red() {
        let depth = Tensor::from_f64(vec![1, 1, 1, 1], &[0.3]).unwrap();
        let stack = RgbdStack::new(px([1.0, 0.0, 0.0]), depth).unwrap();
        assert_eq!(make_hsd(&stack).data(), &[0.0, 1.0, 0.3]);
        let rgbd = make_rgbd_image(&stack);
        assert!((rgbd.data()[0] - 0.3).abs() < 1e-15);
        assert_eq!(&rgbd.data()[1..], &[0.0, 0.0]);
    }

    #[test]
    fn zero_depth_gives_black() {
        let rgb = Tensor::from_fn(vec![1, 2, 2, 3], |i| (i as f64 * 0.13) % 1.0);
        let stack = RgbdStack::new(rgb, Tensor::zeros(vec![1, 2, 2, 1])).unwrap();
        assert_eq!(make_rgbd_image(&stack).max_abs(), 0.0);
    }

    #[test]
    fn stack_rejects_out_of_range_values() {
        let rgb = Tensor::full(vec![1, 1, 1, 3], 1.5);
        assert!(RgbdStack::new(rgb, Tensor::<f64>::zeros(vec![1, 1, 1, 1])).is_err());
    }

    #[test]
    fn augment_shape_and_zero_slice() {
        let w = Tensor::from_fn(vec![3, 3, 3, 5], |i| i as f64 + 1.0);
        let a = conv1e_augment(&w).unwrap();
        assert_eq!(a.shape(), &[3, 3, 4, 5]);
        assert_eq!(a.numel() * 3, w.numel() * 4);
        for tap in 0..9 {
            let t = &a.data()[tap * 20..tap * 20 + 20];
            assert_eq!(&t[..15], &w.data()[tap * 15..tap * 15 + 15]);
            assert!(t[15..].iter().all(|&v| v == 0.0));
        }
    }

    mod props {
        use super::*;
        use crate::backbone::{Backbone, BackboneConfig};
        use crate::nn::ParamStore;
        use proptest::prelude::*;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        fn image(c: usize) -> impl Strategy<Value = Tensor<f64>> {
            prop::collection::vec(0.0f64..=1.0, 2 * 4 * 4 * c).prop_map(move |v| Tensor::new(vec![2, 4, 4, c], v).unwrap())
        }

        proptest! {
            #[test]
            fn hsd_keeps_hue_and_saturation(rgb in image(3), depth in image(1)) {
                let hsv = rgb_to_hsv(&rgb);
                let stack = RgbdStack::new(rgb, depth.clone()).unwrap();
                let hsd = make_hsd(&stack);
                for ((a, b), d) in hsv.data().chunks_exact(3).zip(hsd.data().chunks_exact(3)).zip(depth.data()) {
                    prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
                    prop_assert_eq!(a[1].to_bits(), b[1].to_bits());
                    prop_assert_eq!(b[2], *d);
                }
            }

            #[test]
            fn pixel_images_stay_in_the_unit_cube(rgb in image(3), depth in image(1)) {
                let back = hsv_to_rgb(&rgb_to_hsv(&rgb));
                prop_assert!(back.max_abs_diff(&rgb) < 1e-12);
                let stack = RgbdStack::new(rgb, depth).unwrap();
                for t in [make_hsd(&stack), make_rgbd_image(&stack)] {
                    prop_assert_eq!(t.shape(), &[2, 4, 4, 3][..]);
                    prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }

            #[test]
            fn dmf_is_non_negative(rgb in image(3), depth in image(1), seed in any::<u64>()) {
                let mut store = ParamStore::<f64>::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dmf = Dmf::new(&mut Scope::root(&mut store, &mut rng), "dmf").unwrap();
                let mut fx = Fx::eval(&store);
                let (r, d) = (fx.input(rgb), fx.input(depth));
                let y = dmf.forward(&mut fx, r, d).unwrap();
                prop_assert_eq!(fx.tape.shape(y), &[2, 4, 4, 3][..]);
                prop_assert!(fx.tape.value(y).data().iter().all(|&v| v >= 0.0));
            }

            #[test]
            fn conv1e_backbone_ignores_a_zero_depth_channel(rgb in image(3), seed in any::<u64>()) {
                let build = |c: usize| {
                    let mut store = ParamStore::<f64>::new();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let cfg = BackboneConfig { in_channels: c, image_size: 4, ..BackboneConfig::default() };
                    let bb = Backbone::new(&mut Scope::root(&mut store, &mut rng), "bb", cfg).unwrap();
                    (store, bb)
                };
                let (s3, b3) = build(3);
                let (s4, b4) = build(4);
                let rgbd = Tensor::from_fn(vec![2, 4, 4, 4], |i| if i % 4 == 3 { 0.0 } else { rgb.data()[i / 4 * 3 + i % 4] });
                let mut f3 = Fx::eval(&s3);
                let x3 = f3.input(rgb);
                let y3 = b3.forward(&mut f3, x3).unwrap().data;
                let mut f4 = Fx::eval(&s4);
                let x4 = f4.input(rgbd);
                let y4 = b4.forward(&mut f4, x4).unwrap().data;
                prop_assert!(f3.tape.value(y3).max_abs_diff(f4.tape.value(y4)) <= 1e-6);
            }
        }
    }
}
