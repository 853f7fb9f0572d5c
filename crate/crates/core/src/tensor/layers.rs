//! Declarative sequential layer stacks.

use super::params::{Initializer, LEAKY_SLOPE};
use super::tape::{Bound, Tape, Var};
use super::{Array, ParamStore, TensorError};

/// One layer of a sequential stack. Parameterized layers own `{name}.w`
/// and `{name}.b` in the stack's `ParamStore`.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv { name: String, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize },
    ConvTranspose { name: String, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize },
    Dense { name: String, fin: usize, fout: usize },
    LeakyRelu,
    Sigmoid,
    Upsample2x,
    Flatten,
}

impl LayerSpec {
    pub fn conv(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv { name: name.into(), cin, cout, kernel, stride, pad }
    }

    pub fn dense(name: &str, fin: usize, fout: usize) -> Self {
        LayerSpec::Dense { name: name.into(), fin, fout }
    }

    fn label(&self, index: usize) -> String {
        match self {
            LayerSpec::Conv { name, .. }
            | LayerSpec::ConvTranspose { name, .. }
            | LayerSpec::Dense { name, .. } => name.clone(),
            other => format!("#{index} {other:?}"),
        }
    }

    /// Output item shape (without batch axis) for an input item shape.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match (self, input) {
            (LayerSpec::Conv { cin, cout, kernel, stride, pad, .. }, &[h, w, c]) if c == *cin => {
                let win = super::kernels::Window { kernel: *kernel, stride: *stride, pad: *pad };
                Some(vec![win.out_len(h)?, win.out_len(w)?, *cout])
            }
            (LayerSpec::ConvTranspose { cin, cout, kernel, stride, pad, out_pad, .. }, &[h, w, c]) if c == *cin => {
                let grow = |n: usize| ((n - 1) * stride + kernel + out_pad).checked_sub(2 * pad);
                Some(vec![grow(h)?, grow(w)?, *cout])
            }
            (LayerSpec::Dense { fin, fout, .. }, &[f]) if f == *fin => Some(vec![*fout]),
            (LayerSpec::LeakyRelu | LayerSpec::Sigmoid, s) => Some(s.to_vec()),
            (LayerSpec::Upsample2x, &[h, w, c]) => Some(vec![2 * h, 2 * w, c]),
            (LayerSpec::Flatten, s) => Some(vec![s.iter().product()]),
            _ => None,
        }
    }
}

/// A sequential stack with a declared per-item input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl GraphSpec {
    pub fn new(input: &[usize], layers: Vec<LayerSpec>) -> Self {
        Self { input: input.to_vec(), layers }
    }

    /// Per-item output shape, or the first layer whose input does not fit.
    pub fn output_shape(&self) -> Result<Vec<usize>, TensorError> {
        let mut shape = self.input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).ok_or_else(|| TensorError::Layer {
                layer: layer.label(i),
                expected: format!("{layer:?}"),
                got: shape.clone(),
            })?;
        }
        Ok(shape)
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new(seed);
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv { name, cin, cout, kernel, .. } => init.conv(&mut store, name, *kernel, *cin, *cout),
                LayerSpec::ConvTranspose { name, cin, cout, kernel, stride, .. } => {
                    init.conv_transpose(&mut store, name, *kernel, *stride, *cin, *cout)
                }
                LayerSpec::Dense { name, fin, fout } => init.dense(&mut store, name, *fin, *fout),
                _ => {}
            }
        }
        store
    }

    /// Records the stack on `tape`; `x` is batched (`[N, ..input]`).
    pub fn record(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var, TensorError> {
        let got = tape.shape(x)[1..].to_vec();
        if got != self.input {
            return Err(TensorError::Layer { layer: "input".into(), expected: format!("{:?}", self.input), got });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let wrap = |e: TensorError| match e {
                TensorError::MissingParam(_) => e,
                other => TensorError::InLayer { layer: layer.label(i), source: Box::new(other) },
            };
            h = match layer {
                LayerSpec::Conv { name, stride, pad, .. } => {
                    let (w, b) = (params.get(&format!("{name}.w"))?, params.get(&format!("{name}.b"))?);
                    tape.conv2d(h, w, b, *stride, *pad).map_err(wrap)?
                }
                LayerSpec::ConvTranspose { name, stride, pad, .. } => {
                    let (w, b) = (params.get(&format!("{name}.w"))?, params.get(&format!("{name}.b"))?);
                    let item = tape.shape(h)[1..].to_vec();
                    let out = layer.output_shape(&item).ok_or_else(|| {
                        TensorError::Layer { layer: layer.label(i), expected: format!("{layer:?}"), got: item }
                    })?;
                    tape.conv_transpose2d(h, w, b, *stride, *pad, (out[0], out[1])).map_err(wrap)?
                }
                LayerSpec::Dense { name, .. } => {
                    let (w, b) = (params.get(&format!("{name}.w"))?, params.get(&format!("{name}.b"))?);
                    tape.dense(h, w, b).map_err(wrap)?
                }
                LayerSpec::LeakyRelu => tape.leaky_relu(h, LEAKY_SLOPE),
                LayerSpec::Sigmoid => tape.sigmoid(h),
                LayerSpec::Upsample2x => tape.upsample2x(h).map_err(wrap)?,
                LayerSpec::Flatten => {
                    let n = tape.shape(h)[0];
                    let f = tape.shape(h)[1..].iter().product::<usize>();
                    tape.reshape(h, &[n, f])?
                }
            };
        }
        Ok(h)
    }
}

/// Runs `spec` on a batched input. Records onto `tape` when given.
pub fn forward(
    spec: &GraphSpec,
    params: &ParamStore,
    input: &Array,
    tape: Option<&mut Tape>,
) -> Result<Array, TensorError> {
    for layer in &spec.layers {
        if let LayerSpec::Conv { name, .. } | LayerSpec::ConvTranspose { name, .. } | LayerSpec::Dense { name, .. } =
            layer
        {
            params.require(&format!("{name}.w"))?;
            params.require(&format!("{name}.b"))?;
        }
    }
    let mut local = Tape::new();
    let tape = tape.unwrap_or(&mut local);
    let bound = tape.bind(params);
    let x = tape.constant(input.clone());
    let y = spec.record(tape, &bound, x)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_encoder() -> GraphSpec {
        GraphSpec::new(
            &[64, 64, 1],
            vec![
                LayerSpec::conv("l1", 1, 32, 3, 1, 1),
                LayerSpec::conv("l2", 32, 64, 4, 2, 1),
                LayerSpec::conv("l3", 64, 128, 4, 2, 1),
                LayerSpec::conv("l4", 128, 4, 4, 2, 1),
            ],
        )
    }

    #[test]
    fn encoder_stack_shapes() {
        let spec = table_encoder();
        let mut shape = spec.input.clone();
        let want = [[64, 64, 32], [32, 32, 64], [16, 16, 128], [8, 8, 4]];
        for (layer, w) in spec.layers.iter().zip(want) {
            shape = layer.output_shape(&shape).unwrap();
            assert_eq!(shape, w);
        }
    }

    #[test]
    fn discriminator_stack_shapes() {
        let spec = GraphSpec::new(
            &[64, 64, 1],
            vec![
                LayerSpec::conv("d1", 1, 64, 4, 2, 1),
                LayerSpec::conv("d2", 64, 128, 4, 2, 1),
                LayerSpec::conv("d3", 128, 256, 4, 2, 1),
                LayerSpec::conv("d4", 256, 512, 4, 1, 1),
                LayerSpec::conv("d5", 512, 1, 4, 1, 1),
            ],
        );
        assert_eq!(spec.output_shape().unwrap(), vec![6, 6, 1]);
    }

    #[test]
    fn flow_unet_shapes() {
        let down = GraphSpec::new(
            &[8, 8, 5],
            vec![
                LayerSpec::conv("c1", 5, 32, 3, 1, 1),
                LayerSpec::conv("c2", 32, 64, 3, 2, 1),
                LayerSpec::conv("c3", 64, 128, 3, 2, 1),
                LayerSpec::conv("c4", 128, 256, 3, 2, 1),
            ],
        );
        assert_eq!(down.output_shape().unwrap(), vec![1, 1, 256]);
        let up = |cin, cout, s, op, pad| LayerSpec::ConvTranspose {
            name: "t".into(),
            cin,
            cout,
            kernel: 3,
            stride: s,
            pad,
            out_pad: op,
        };
        assert_eq!(up(256, 128, 2, 1, 1).output_shape(&[1, 1, 256]).unwrap(), vec![2, 2, 128]);
        assert_eq!(up(128, 64, 2, 1, 1).output_shape(&[2, 2, 128]).unwrap(), vec![4, 4, 64]);
        assert_eq!(up(64, 32, 2, 1, 1).output_shape(&[4, 4, 64]).unwrap(), vec![8, 8, 32]);
        assert_eq!(up(32, 4, 1, 0, 1).output_shape(&[8, 8, 32]).unwrap(), vec![8, 8, 4]);
    }

    #[test]
    fn forward_reports_offending_layer() {
        let spec = table_encoder();
        let params = spec.init_params(0);
        let bad = Array::zeros(&[1, 64, 64, 2]);
        let err = forward(&spec, &params, &bad, None).unwrap_err();
        assert!(err.to_string().contains("input"), "{err}");

        let mut spec2 = spec.clone();
        spec2.input = vec![64, 64, 1];
        spec2.layers[1] = LayerSpec::conv("l2", 16, 64, 4, 2, 1);
        let err = spec2.output_shape().unwrap_err();
        assert!(err.to_string().contains("l2"), "{err}");
    }

    #[test]
    fn forward_produces_declared_shape() {
        let spec = GraphSpec::new(
            &[16, 16, 1],
            vec![
                LayerSpec::conv("a", 1, 4, 4, 2, 1),
                LayerSpec::LeakyRelu,
                LayerSpec::Upsample2x,
                LayerSpec::conv("b", 4, 1, 3, 1, 1),
                LayerSpec::Sigmoid,
            ],
        );
        let p = spec.init_params(3);
        let y = forward(&spec, &p, &Array::full(&[2, 16, 16, 1], 0.5), None).unwrap();
        assert_eq!(y.shape(), &[2, 16, 16, 1]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
