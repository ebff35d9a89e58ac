use sider::data::{synth_faces_with, ImageSample, SynthOptions};
use sider::identity::{
    accept_rate, calibrate_threshold, ks_two_sample, pair_similarities, train_embedder, Embedder, EmbedderTraining,
};

fn sims(model: &Embedder, samples: &[&ImageSample]) -> (Vec<f64>, Vec<f64>) {
    let embs = model.embed_all(&samples.iter().map(|s| &s.pixels).collect::<Vec<_>>()).unwrap();
    let labels: Vec<usize> = samples.iter().map(|s| s.identity_id).collect();
    pair_similarities(&embs, &labels)
}

// An untrained model does not separate genuine from impostor pairs as well
// as a trained one. Random conv features still carry pixel similarity, so the
// two untrained distributions are not indistinguishable on synthetic faces;
// the test pins the ordering rather than a p-value.
#[test]
fn training_separates_identities() {
    let opts = SynthOptions { resolution: 16, ..SynthOptions::default() };
    let data = synth_faces_with(40, 4, 11, &opts).unwrap();
    let train: Vec<&ImageSample> = data.samples().iter().filter(|s| s.identity_id < 30).collect();
    let held: Vec<&ImageSample> = data.samples().iter().filter(|s| s.identity_id >= 30).collect();
    let tr = EmbedderTraining { epochs: 12, ..EmbedderTraining::default() };

    let (random, _) = train_embedder(&train, 0, &EmbedderTraining { epochs: 0, ..tr }).unwrap();
    let (trained, hist) = train_embedder(&train, 0, &tr).unwrap();
    assert!(hist.last().unwrap() < &hist[0]);

    let (g0, i0) = sims(&random, &train);
    let (g1, i1) = sims(&trained, &train);
    let (d0, p0) = ks_two_sample(&g0, &i0);
    let (d1, _) = ks_two_sample(&g1, &i1);
    eprintln!("untrained KS D {d0:.3} p {p0:.2e}, trained KS D {d1:.3}");
    assert!(d1 > d0);

    let t = calibrate_threshold(&trained, "trained", &held, 0.01).unwrap();
    let (g, _) = sims(&trained, &held);
    assert!(accept_rate(&g, t.tau) > 0.5, "genuine accept {:.2} at tau {:.3}", accept_rate(&g, t.tau), t.tau);
}
