use super::tensor::Tensor;
use super::NnError;
use crate::rng::Rng;

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng)
}

/// Fully connected layer: y = W x + b with W stored [out, in] row-major.
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
    cached_input: Option<Tensor>,
}

impl Affine {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Affine {
            weight: glorot(&[out_dim, in_dim], in_dim, out_dim, rng),
            bias: Tensor::zeros(&[out_dim]),
            grad_weight: Tensor::zeros(&[out_dim, in_dim]),
            grad_bias: Tensor::zeros(&[out_dim]),
            cached_input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn name(&self) -> String {
        format!("affine({}->{})", self.in_dim(), self.out_dim())
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, NnError> {
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        if input.len() != in_dim {
            return Err(NnError::ShapeMismatch {
                layer: self.name(),
                expected: format!("[{in_dim}]"),
                got: input.shape().to_vec(),
            });
        }
        let x = input.data();
        let w = self.weight.data();
        let mut out = self.bias.data().to_vec();
        for (o, out_o) in out.iter_mut().enumerate() {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(x.iter()) {
                acc += wi * xi;
            }
            *out_o += acc;
        }
        self.cached_input = Some(input.reshaped(&[in_dim]));
        Ok(Tensor::from_vec(&[out_dim], out))
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NnError> {
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        let x = self.cached_input.as_ref().ok_or(NnError::BackwardBeforeForward {
            layer: self.name(),
        })?;
        if upstream.len() != out_dim {
            return Err(NnError::ShapeMismatch {
                layer: self.name(),
                expected: format!("[{out_dim}]"),
                got: upstream.shape().to_vec(),
            });
        }
        let g = upstream.data();
        let xd = x.data();
        let mut dx = vec![0.0; in_dim];
        let w = self.weight.data();
        let gw = self.grad_weight.data_mut();
        for o in 0..out_dim {
            let go = g[o];
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                grow[i] += go * xd[i];
                dx[i] += go * row[i];
            }
        }
        for (gb, go) in self.grad_bias.data_mut().iter_mut().zip(g.iter()) {
            *gb += go;
        }
        Ok(Tensor::from_vec(&[in_dim], dx))
    }
}

/// Elementwise max(x, 0).
#[derive(Clone, Debug, Default)]
pub struct Relu {
    cached_input: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, NnError> {
        let mut out = input.clone();
        out.data_mut().iter_mut().for_each(|x| {
            if *x < 0.0 {
                *x = 0.0
            }
        });
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NnError> {
        let x = self.cached_input.as_ref().ok_or(NnError::BackwardBeforeForward {
            layer: "relu".into(),
        })?;
        if upstream.shape() != x.shape() {
            return Err(NnError::ShapeMismatch {
                layer: "relu".into(),
                expected: format!("{:?}", x.shape()),
                got: upstream.shape().to_vec(),
            });
        }
        let mut dx = upstream.clone();
        for (d, xi) in dx.data_mut().iter_mut().zip(x.data().iter()) {
            if *xi <= 0.0 {
                *d = 0.0;
            }
        }
        Ok(dx)
    }
}

/// Elementwise logistic function.
#[derive(Clone, Debug, Default)]
pub struct Sigmoid {
    cached_output: Option<Tensor>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Sigmoid::default()
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, NnError> {
        let mut out = input.clone();
        out.data_mut().iter_mut().for_each(|x| *x = super::sigmoid(*x));
        self.cached_output = Some(out.clone());
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NnError> {
        let y = self.cached_output.as_ref().ok_or(NnError::BackwardBeforeForward {
            layer: "sigmoid".into(),
        })?;
        if upstream.shape() != y.shape() {
            return Err(NnError::ShapeMismatch {
                layer: "sigmoid".into(),
                expected: format!("{:?}", y.shape()),
                got: upstream.shape().to_vec(),
            });
        }
        let mut dx = upstream.clone();
        for (d, yi) in dx.data_mut().iter_mut().zip(y.data().iter()) {
            *d *= yi * (1.0 - yi);
        }
        Ok(dx)
    }
}

/// Softmax over a vector, computed with max subtraction.
#[derive(Clone, Debug, Default)]
pub struct Softmax {
    cached_output: Option<Tensor>,
}

impl Softmax {
    pub fn new() -> Self {
        Softmax::default()
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, NnError> {
        let out = Tensor::from_vec(input.shape(), super::softmax(input.data()));
        self.cached_output = Some(out.clone());
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NnError> {
        let s = self.cached_output.as_ref().ok_or(NnError::BackwardBeforeForward {
            layer: "softmax".into(),
        })?;
        if upstream.shape() != s.shape() {
            return Err(NnError::ShapeMismatch {
                layer: "softmax".into(),
                expected: format!("{:?}", s.shape()),
                got: upstream.shape().to_vec(),
            });
        }
        let dot: f64 = upstream
            .data()
            .iter()
            .zip(s.data().iter())
            .map(|(g, si)| g * si)
            .sum();
        let dx: Vec<f64> = upstream
            .data()
            .iter()
            .zip(s.data().iter())
            .map(|(g, si)| si * (g - dot))
            .collect();
        Ok(Tensor::from_vec(s.shape(), dx))
    }
}

/// 2-D convolution over [C, H, W] input, stride 1, zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor, // [out_ch, in_ch, k, k]
    pub bias: Tensor,   // [out_ch]
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
    in_ch: usize,
    out_ch: usize,
    ksize: usize,
    pad: usize,
    cached_input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, ksize: usize, pad: usize, rng: &mut Rng) -> Self {
        let fan_in = in_ch * ksize * ksize;
        let fan_out = out_ch * ksize * ksize;
        Conv2d {
            weight: glorot(&[out_ch, in_ch, ksize, ksize], fan_in, fan_out, rng),
            bias: Tensor::zeros(&[out_ch]),
            grad_weight: Tensor::zeros(&[out_ch, in_ch, ksize, ksize]),
            grad_bias: Tensor::zeros(&[out_ch]),
            in_ch,
            out_ch,
            ksize,
            pad,
            cached_input: None,
        }
    }

    fn name(&self) -> String {
        format!("conv2d({}->{},{}x{})", self.in_ch, self.out_ch, self.ksize, self.ksize)
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.pad + 1 - self.ksize, w + 2 * self.pad + 1 - self.ksize)
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize), NnError> {
        let s = input.shape();
        let ok = s.len() == 3
            && s[0] == self.in_ch
            && s[1] + 2 * self.pad >= self.ksize
            && s[2] + 2 * self.pad >= self.ksize;
        if !ok {
            return Err(NnError::ShapeMismatch {
                layer: self.name(),
                expected: format!("[{}, >={k}, >={k}]", self.in_ch, k = self.ksize.saturating_sub(2 * self.pad)),
                got: s.to_vec(),
            });
        }
        Ok((s[1], s[2]))
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, NnError> {
        let (h, w) = self.check_input(input)?;
        let (oh, ow) = self.out_hw(h, w);
        let k = self.ksize;
        let pad = self.pad as isize;
        let x = input.data();
        let wt = self.weight.data();
        let mut out = vec![0.0; self.out_ch * oh * ow];

        for oc in 0..self.out_ch {
            let b = self.bias.data()[oc];
            let out_plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            out_plane.iter_mut().for_each(|v| *v = b);
            for ic in 0..self.in_ch {
                let in_plane = &x[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[((oc * self.in_ch + ic) * k + ky) * k + kx];
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        // output rows where the shifted input row is in range
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(ow as isize)).max(0) as usize;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let orow = &mut out_plane[y * ow + x0..y * ow + x1];
                            let irow = &in_plane
                                [iy * w + (x0 as isize + dx) as usize..iy * w + (x1 as isize + dx) as usize];
                            for (o, i) in orow.iter_mut().zip(irow.iter()) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
        self.cached_input = Some(input.clone());
        Ok(Tensor::from_vec(&[self.out_ch, oh, ow], out))
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NnError> {
        let input = self.cached_input.take().ok_or(NnError::BackwardBeforeForward {
            layer: self.name(),
        })?;
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let (oh, ow) = self.out_hw(h, w);
        if upstream.shape() != [self.out_ch, oh, ow] {
            return Err(NnError::ShapeMismatch {
                layer: self.name(),
                expected: format!("[{}, {oh}, {ow}]", self.out_ch),
                got: upstream.shape().to_vec(),
            });
        }
        let k = self.ksize;
        let pad = self.pad as isize;
        let x = input.data();
        let g = upstream.data();
        let wt = self.weight.data();
        let gw = self.grad_weight.data_mut();
        let gb = self.grad_bias.data_mut();
        let mut dx = vec![0.0; x.len()];

        for oc in 0..self.out_ch {
            let g_plane = &g[oc * oh * ow..(oc + 1) * oh * ow];
            gb[oc] += g_plane.iter().sum::<f64>();
            for ic in 0..self.in_ch {
                let in_plane = &x[ic * h * w..(ic + 1) * h * w];
                let dx_plane = &mut dx[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * self.in_ch + ic) * k + ky) * k + kx;
                        let wv = wt[widx];
                        let dy = ky as isize - pad;
                        let dxo = kx as isize - pad;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                        let x0 = (-dxo).max(0) as usize;
                        let x1 = ((w as isize - dxo).min(ow as isize)).max(0) as usize;
                        let mut wacc = 0.0;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let grow = &g_plane[y * ow + x0..y * ow + x1];
                            let ix0 = (x0 as isize + dxo) as usize;
                            let ix1 = (x1 as isize + dxo) as usize;
                            let irow = &in_plane[iy * w + ix0..iy * w + ix1];
                            let drow = &mut dx_plane[iy * w + ix0..iy * w + ix1];
                            for ((gv, iv), dv) in grow.iter().zip(irow.iter()).zip(drow.iter_mut()) {
                                wacc += gv * iv;
                                *dv += gv * wv;
                            }
                        }
                        gw[widx] += wacc;
                    }
                }
            }
        }
        let shape = input.shape().to_vec();
        self.cached_input = Some(input);
        Ok(Tensor::from_vec(&shape, dx))
    }
}

/// 2x2 max pooling with stride 2 (truncating odd edges).
#[derive(Clone, Debug, Default)]
pub struct MaxPool2d {
    cached: Option<(Vec<usize>, Vec<usize>)>, // input shape, argmax flat index per output
}

impl MaxPool2d {
    pub fn new() -> Self {
        MaxPool2d::default()
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, NnError> {
        let s = input.shape();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(NnError::ShapeMismatch {
                layer: "maxpool2d".into(),
                expected: "[C, >=2, >=2]".into(),
                got: s.to_vec(),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let x = input.data();
        let mut out = vec![0.0; c * oh * ow];
        let mut arg = vec![0usize; c * oh * ow];
        for ch in 0..c {
            let plane = ch * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let base = plane + 2 * y * w + 2 * xo;
                    let mut best = x[base];
                    let mut bi = base;
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = base + dy * w + dx;
                        if x[idx] > best {
                            best = x[idx];
                            bi = idx;
                        }
                    }
                    out[(ch * oh + y) * ow + xo] = best;
                    arg[(ch * oh + y) * ow + xo] = bi;
                }
            }
        }
        self.cached = Some((s.to_vec(), arg));
        Ok(Tensor::from_vec(&[c, oh, ow], out))
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NnError> {
        let (in_shape, arg) = self.cached.as_ref().ok_or(NnError::BackwardBeforeForward {
            layer: "maxpool2d".into(),
        })?;
        if upstream.len() != arg.len() {
            return Err(NnError::ShapeMismatch {
                layer: "maxpool2d".into(),
                expected: format!("{} elements", arg.len()),
                got: upstream.shape().to_vec(),
            });
        }
        let mut dx = Tensor::zeros(in_shape);
        let d = dx.data_mut();
        for (g, &idx) in upstream.data().iter().zip(arg.iter()) {
            d[idx] += g;
        }
        Ok(dx)
    }
}

/// Collapses any shape to a vector.
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    cached_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten::default()
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, NnError> {
        self.cached_shape = Some(input.shape().to_vec());
        Ok(input.reshaped(&[input.len()]))
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NnError> {
        let shape = self.cached_shape.as_ref().ok_or(NnError::BackwardBeforeForward {
            layer: "flatten".into(),
        })?;
        if upstream.len() != shape.iter().product::<usize>() {
            return Err(NnError::ShapeMismatch {
                layer: "flatten".into(),
                expected: format!("{:?}", shape),
                got: upstream.shape().to_vec(),
            });
        }
        Ok(upstream.reshaped(shape))
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Affine(Affine),
    Relu(Relu),
    Sigmoid(Sigmoid),
    Softmax(Softmax),
    Conv2d(Conv2d),
    MaxPool2d(MaxPool2d),
    Flatten(Flatten),
}

impl Layer {
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, NnError> {
        match self {
            Layer::Affine(l) => l.forward(input),
            Layer::Relu(l) => l.forward(input),
            Layer::Sigmoid(l) => l.forward(input),
            Layer::Softmax(l) => l.forward(input),
            Layer::Conv2d(l) => l.forward(input),
            Layer::MaxPool2d(l) => l.forward(input),
            Layer::Flatten(l) => l.forward(input),
        }
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NnError> {
        match self {
            Layer::Affine(l) => l.backward(upstream),
            Layer::Relu(l) => l.backward(upstream),
            Layer::Sigmoid(l) => l.backward(upstream),
            Layer::Softmax(l) => l.backward(upstream),
            Layer::Conv2d(l) => l.backward(upstream),
            Layer::MaxPool2d(l) => l.backward(upstream),
            Layer::Flatten(l) => l.backward(upstream),
        }
    }

    /// Parameter/gradient pairs, weights before biases.
    pub fn param_grad_pairs(&mut self) -> Vec<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Affine(l) => vec![
                (&mut l.weight, &mut l.grad_weight),
                (&mut l.bias, &mut l.grad_bias),
            ],
            Layer::Conv2d(l) => vec![
                (&mut l.weight, &mut l.grad_weight),
                (&mut l.bias, &mut l.grad_bias),
            ],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Affine(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::Conv2d(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            _ => Vec::new(),
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, g) in self.param_grad_pairs() {
            g.fill(0.0);
        }
    }
}

/// A plain sequential stack of layers.
#[derive(Clone, Debug, Default)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, NnError> {
        let mut cur = input.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the forward input.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NnError> {
        let mut cur = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grads();
        }
    }

    pub fn param_grad_pairs(&mut self) -> Vec<(&mut Tensor, &mut Tensor)> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_grad_pairs())
            .collect()
    }

    /// (name, tensor) view of all parameters, names like "3.weight".
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params()
                    .into_iter()
                    .map(move |(field, t)| (format!("{i}.{field}"), t))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|(_, t)| t.len())
            .sum()
    }
}
