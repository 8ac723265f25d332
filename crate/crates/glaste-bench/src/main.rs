// temporary: inspect recognizer inputs and loss curve
use glaste_core::data::{self, Alphabet, DataConfig, SampleMode};
use glaste_core::losses::*;
use glaste_core::nets::greedy_ctc_decode;
use glaste_core::pipeline::*;
use glaste_core::Tape;

fn main() {
    let tcfg = TrainConfig::toy();
    let dcfg = DataConfig::from_net(&tcfg.net);
    std::fs::create_dir_all("/tmp/patches").unwrap();
    for i in 0..8u64 {
        let s = data::render_sample(&dcfg, 7070 + i, SampleMode::Paired).unwrap();
        data::save_image(&s.gt_patch, std::path::Path::new(&format!("/tmp/patches/{i}_patch_{}.png", s.target_text))).unwrap();
        data::save_image(&s.scene, std::path::Path::new(&format!("/tmp/patches/{i}_scene.png"))).unwrap();
        data::save_image(&s.gt_edited, std::path::Path::new(&format!("/tmp/patches/{i}_gt.png"))).unwrap();
        data::save_image(&s.content, std::path::Path::new(&format!("/tmp/patches/{i}_content.png"))).unwrap();
        println!("sample {i}: src='{}' tgt='{}' box w={:.1} h={:.1} th={:.2}", s.source_text, s.target_text, s.bx.w, s.bx.h, s.bx.theta);
    }
    // loss curve for 600 steps
    let mut model = Model::<f32>::init(&tcfg.net, tcfg.seed).unwrap();
    let mut opt = Optimizer::<f32>::new(1e-3);
    let rec_ids = model.params.ids_with_prefix("recognizer.");
    for step in 0..600u64 {
        let seeds: Vec<u64> = (0..16).map(|i| 5000 + step * 16 + i).collect();
        let samples = data::make_batch(&dcfg, &seeds, 1.0).unwrap();
        let batch = batch_tensors::<f32>(&samples).unwrap();
        let mut tape = Tape::new();
        let live = model.params.live(&mut tape, |e| e.name.starts_with("recognizer."));
        let lp = model.recognizer.forward(&mut tape, &live, &batch.ref_patch).unwrap();
        let loss = ctc_loss(&mut tape, &lp, &batch.labels).unwrap();
        opt.t += 1;
        let grads = tape.backward(&loss).unwrap();
        opt.apply(&mut model.params, &rec_ids, &live, &grads).unwrap();
        if step % 100 == 0 || step == 599 {
            let decoded = greedy_ctc_decode(&lp).unwrap();
            println!("step {step} loss={:.4} decode0='{}' gt0='{}'",
                loss.item(), Alphabet::string(&decoded[0]), batch.labels[0].raw);
        }
    }
}
