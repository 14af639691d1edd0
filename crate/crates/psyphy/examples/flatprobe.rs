use ndarray::{Array1, Array2};
use psyphy::imgops;
use psyphy::stimuli::synth_dataset;
use psyphy::zoo::{ArchName, Model, ModelSpec};

fn features_for(model: &Model<f32>, set: &[(image::RgbImage, f64)], size: (usize, usize)) -> (Array2<f32>, Vec<usize>) {
    let rows: Vec<Array1<f32>> = set
        .iter()
        .map(|(img, _)| {
            let x = imgops::preprocess(img, size);
            let f = model.features(&x).unwrap();
            model.flatten_features(&f)
        })
        .collect();
    let labels: Vec<usize> = set.iter().map(|(_, v)| if *v >= 0.0 { 1 } else { 0 }).collect();
    let d = rows[0].len();
    let mut x = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        x.row_mut(i).assign(r);
    }
    (x, labels)
}

// Plain logistic regression with gradient descent.
fn logistic_acc(xtr: &Array2<f32>, ytr: &[usize], xte: &Array2<f32>, yte: &[usize], steps: usize, lr: f32) -> f64 {
    let d = xtr.ncols();
    let mut w = Array1::<f32>::zeros(d);
    let mut b = 0.0f32;
    let n = xtr.nrows() as f32;
    for _ in 0..steps {
        let z = xtr.dot(&w) + b;
        let p = z.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let err = &p - &Array1::from_iter(ytr.iter().map(|&l| l as f32));
        let gw = xtr.t().dot(&err) / n;
        let gb = err.sum() / n;
        w -= &(gw * lr);
        b -= gb * lr;
    }
    let z = xte.dot(&w) + b;
    let correct = z.iter().zip(yte).filter(|(z, &l)| (**z > 0.0) as usize == l).count();
    correct as f64 / yte.len() as f64
}

fn main() {
    for (size, px) in [((96usize, 96usize), 96u32), ((128, 128), 128u32), ((96, 96), 128u32)] {
        let spec = ModelSpec::new(ArchName::FeAlexnet, size, 2).unwrap();
        let model = Model::<f32>::new_random(spec, 42).unwrap();
        let train = synth_dataset(96, 1, px);
        let val = synth_dataset(32, 2, px);
        let (xtr, ytr) = features_for(&model, &train, size);
        let (xte, yte) = features_for(&model, &val, size);
        let acc = logistic_acc(&xtr, &ytr, &xte, &yte, 400, 0.05);
        let std: f32 = xtr.iter().map(|v| v * v).sum::<f32>() / xtr.len() as f32;
        println!("input {size:?}: feature_dim {} rms {:.3} LR-oracle val acc {acc:.3}", xtr.ncols(), std.sqrt());
    }
}
