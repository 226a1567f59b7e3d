use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Non-overlapping window means over the (F, T) axes of `[B, C, F, T]`.
/// Windows must tile both axes exactly.
pub fn avgpool2d<T: Real>(x: &Tensor<T>, window: (usize, usize)) -> Result<Tensor<T>> {
    let [b, c, f, t] = x.dims::<4>("avgpool2d input")?;
    let (wf, wt) = window;
    if wf == 0 || wt == 0 || f % wf != 0 || t % wt != 0 {
        return shape_err(format!("pool window {wf}x{wt} does not tile extent {f}x{t}"));
    }
    let (fo, to) = (f / wf, t / wt);
    let scale = T::one() / T::from_usize(wf * wt).unwrap();
    let xd = x.data();
    let mut out = vec![T::zero(); b * c * fo * to];
    for plane in 0..b * c {
        let src = &xd[plane * f * t..(plane + 1) * f * t];
        let dst = &mut out[plane * fo * to..(plane + 1) * fo * to];
        for i in 0..fo {
            for j in 0..to {
                let mut s = T::zero();
                for di in 0..wf {
                    let row = &src[(i * wf + di) * t + j * wt..(i * wf + di) * t + (j + 1) * wt];
                    s = s + row.iter().copied().sum::<T>();
                }
                dst[i * to + j] = s * scale;
            }
        }
    }
    Tensor::new(vec![b, c, fo, to], out)
}

pub fn avgpool2d_backward<T: Real>(
    input_shape: &[usize],
    window: (usize, usize),
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, c, f, t] = <[usize; 4]>::try_from(input_shape)
        .map_err(|_| crate::Error::Shape(format!("avgpool2d input must be rank 4, got {input_shape:?}")))?;
    let (wf, wt) = window;
    let (fo, to) = (f / wf, t / wt);
    if upstream.shape() != [b, c, fo, to] {
        return shape_err(format!("avgpool2d upstream {:?} does not match output", upstream.shape()));
    }
    let scale = T::one() / T::from_usize(wf * wt).unwrap();
    let gd = upstream.data();
    let mut out = vec![T::zero(); b * c * f * t];
    for plane in 0..b * c {
        for fi in 0..f {
            for ti in 0..t {
                out[(plane * f + fi) * t + ti] = gd[(plane * fo + fi / wf) * to + ti / wt] * scale;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}
