use std::fs;

use deblursplat::alignment::PointMap;
use deblursplat::events::{bin_events, synthesize_blur, Event};
use deblursplat::geometry::{se3_exp, Twist};
use deblursplat::io::{self, PlyFormat, PointMapRecord};
use deblursplat::metrics::TimedPose;
use deblursplat::sampling::ConfidencePointCloud;
use deblursplat::synthetic::{
    generate, generate_synthetic_dataset, load_dataset, sharp_file_name, view_dir, SyntheticDatasetSpec,
};
use deblursplat::Image;
use nalgebra::Vector3;
use proptest::prelude::*;

fn tiny_spec() -> SyntheticDatasetSpec {
    SyntheticDatasetSpec { gaussians: 15, width: 20, height: 16, views: 2, u: 3, focal: 20.0, ..Default::default() }
}

fn f32_image(w: usize, h: usize, c: usize, seed: u32) -> Image {
    Image::from_fn(w, h, c, |x, y, ch| {
        let v = ((x as u32).wrapping_mul(2654435761) ^ (y as u32).wrapping_mul(40503) ^ (ch as u32 * 977) ^ seed) % 100_000;
        let v = v as f64 / 7919.0 - 3.0;
        v as f32 as f64
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pfm_round_trip_is_exact(w in 1usize..12, h in 1usize..12, gray in any::<bool>(), seed in any::<u32>()) {
        let img = f32_image(w, h, if gray { 1 } else { 3 }, seed);
        let bytes = io::encode_pfm(&img).unwrap();
        prop_assert_eq!(io::decode_pfm(&bytes, "x.pfm".as_ref()).unwrap(), img);
    }

    #[test]
    fn binary_events_round_trip(raw in prop::collection::vec((0u16..640, 0u16..480, any::<u64>(), any::<bool>()), 0..50)) {
        let events: Vec<Event> = raw.iter().map(|&(x, y, t_us, p)| Event { x, y, t_us, polarity: if p { 1 } else { -1 } }).collect();
        let bytes = io::encode_events_bin(640, 480, &events);
        prop_assert_eq!(bytes.len(), 16 + 13 * events.len());
        let file = io::decode_events_bin(&bytes, "e.bin".as_ref()).unwrap();
        prop_assert_eq!((file.width, file.height), (640, 480));
        prop_assert_eq!(file.events, events);
    }

    #[test]
    fn tum_round_trip_keeps_nine_digits(seed in 0u64..1000) {
        let poses: Vec<TimedPose> = (0..5)
            .map(|i| {
                let s = (seed * 7 + i) as f64;
                TimedPose {
                    timestamp: s * 0.0137,
                    pose: se3_exp(&Twist::new(
                        Vector3::new(s.sin() * 3.0, s.cos(), 0.1 * s),
                        Vector3::new((0.3 * s).sin(), 0.2, -(0.7 * s).cos()),
                    )),
                }
            })
            .collect();
        let text = io::format_tum(&poses);
        let parsed = io::parse_tum(&text, "t.tum".as_ref()).unwrap();
        for (a, b) in parsed.iter().zip(&poses) {
            prop_assert!((a.timestamp - b.timestamp).abs() <= 1e-8 * b.timestamp.abs().max(1e-3));
            prop_assert!((a.pose.translation - b.pose.translation).amax() <= 1e-8 * b.pose.translation.amax().max(1e-3));
            prop_assert!((a.pose.rotation - b.pose.rotation).amax() < 1e-8);
        }
        let again = io::parse_tum(&io::format_tum(&parsed), "t.tum".as_ref()).unwrap();
        for (a, b) in again.iter().zip(&parsed) {
            prop_assert_eq!(a.timestamp, b.timestamp);
            prop_assert!((a.pose.translation - b.pose.translation).amax() == 0.0);
            prop_assert!((a.pose.rotation - b.pose.rotation).amax() < 1e-8);
        }
    }
}

#[test]
fn event_files_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let events = vec![
        Event { x: 1, y: 2, t_us: 10, polarity: 1 },
        Event { x: 3, y: 0, t_us: 42, polarity: -1 },
    ];
    io::write_events_csv(dir.path().join("e.csv"), &events).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("e.csv")).unwrap(), "x,y,t_us,p\n1,2,10,1\n3,0,42,-1\n");
    assert_eq!(io::read_events_csv(dir.path().join("e.csv")).unwrap(), events);
    io::write_events_bin(dir.path().join("e.bin"), 4, 3, &events).unwrap();
    let bytes = fs::read(dir.path().join("e.bin")).unwrap();
    assert_eq!(&bytes[..8], b"EVT1\x04\x00\x03\x00");
    assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
    assert_eq!(io::read_events_bin(dir.path().join("e.bin")).unwrap().events, events);
}

#[test]
fn png_ingest_maps_bytes_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_fn(3, 2, 3, |x, y, c| ((x * 50 + y * 20 + c * 5) as f64) / 255.0).unwrap();
    io::write_png(dir.path().join("a.png"), &img).unwrap();
    let back = io::read_png(dir.path().join("a.png")).unwrap();
    assert!(back.max_abs_diff(&img) < 1e-12);
}

#[test]
fn ply_files_round_trip_in_both_encodings() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(&tiny_spec()).unwrap();
    for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
        let path = dir.path().join(format!("scene_{format:?}.ply"));
        io::write_scene_ply(&path, &d.scene, format).unwrap();
        assert_eq!(io::read_scene_ply(&path).unwrap(), d.scene);

        let path = dir.path().join(format!("cloud_{format:?}.ply"));
        io::write_point_cloud_ply(&path, &d.cloud, format).unwrap();
        let back = io::read_point_cloud_ply(&path).unwrap();
        assert_eq!(back.positions, d.cloud.positions);
        assert_eq!(back.confidence, d.cloud.confidence);
        let header = String::from_utf8_lossy(&fs::read(&path).unwrap()[..200]).to_string();
        assert!(header.contains("property float confidence") || header.contains("property double confidence"));
    }
    let plain = ConfidencePointCloud::new(vec![Vector3::new(1.0, 2.0, 3.0)], None, vec![0.5]).unwrap();
    let path = dir.path().join("plain.ply");
    io::write_point_cloud_ply(&path, &plain, PlyFormat::Ascii).unwrap();
    assert_eq!(io::read_point_cloud_ply(&path).unwrap().positions, plain.positions);
}

#[test]
fn scales_and_pointmaps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scales = vec![(0, 1, 1.25), (1, 2, 0.8)];
    io::write_scales(dir.path().join("scales.txt"), &scales).unwrap();
    assert_eq!(io::read_scales(dir.path().join("scales.txt")).unwrap(), scales);

    let points = (0..12).map(|k| Vector3::new(k as f32 as f64 * 0.5, -(k as f64), 2.0)).collect();
    let confidence: Vec<f64> = (0..12).map(|k| if k == 5 { 0.0 } else { 1.0 + k as f64 }).collect();
    let valid = confidence.iter().map(|&c| c > 0.0).collect();
    let record = PointMapRecord { edge_n: 0, edge_m: 3, view: 3, map: PointMap::new(4, 3, points, confidence, valid).unwrap() };
    let stem = dir.path().join("pm_0_3_v3");
    io::write_pointmap(&stem, &record).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("pm_0_3_v3.txt")).unwrap(), "0 3 3\n");
    assert_eq!(io::read_pointmap(&stem).unwrap(), record);
}

#[test]
fn synthetic_dataset_regenerates_byte_identically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic_dataset(&tiny_spec(), a.path()).unwrap();
    generate_synthetic_dataset(&tiny_spec(), b.path()).unwrap();
    let files: Vec<_> = walk(a.path());
    assert!(files.len() > 10);
    for rel in files {
        assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap(), "{rel:?}");
    }
    let c = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&SyntheticDatasetSpec { seed: 1, ..tiny_spec() }, c.path()).unwrap();
    assert_ne!(fs::read(a.path().join("scene_gt.ply")).unwrap(), fs::read(c.path().join("scene_gt.ply")).unwrap());
}

fn walk(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn stored_blur_is_the_mean_of_stored_sharp_frames() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    generate_synthetic_dataset(&spec, dir.path()).unwrap();
    for v in 0..spec.views {
        let vd = view_dir(dir.path(), v);
        let sharp: Vec<Image> = (0..=spec.u).map(|k| io::read_pfm(vd.join(sharp_file_name(k))).unwrap()).collect();
        let mut mean = synthesize_blur(&sharp).unwrap();
        mean.quantize_f32();
        assert_eq!(io::encode_pfm(&mean).unwrap(), fs::read(vd.join("blur.pfm")).unwrap());
    }
}

#[test]
fn single_latent_without_motion_blurs_to_the_sharp_frame() {
    let spec = SyntheticDatasetSpec { u: 1, translation_amplitude: 0.0, rotation_amplitude: 0.0, ..tiny_spec() };
    let d = generate(&spec).unwrap();
    for v in &d.views {
        assert_eq!(v.sharp.len(), 2);
        assert_eq!(v.blur, v.sharp[1]);
        assert!(v.events.events.is_empty());
    }
    let moving = generate(&SyntheticDatasetSpec { u: 1, ..tiny_spec() }).unwrap();
    for v in &moving.views {
        let mut mean = synthesize_blur(&v.sharp).unwrap();
        mean.quantize_f32();
        assert_eq!(v.blur, mean);
    }
}

#[test]
fn loader_returns_what_the_generator_wrote() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    let d = generate_synthetic_dataset(&spec, dir.path()).unwrap();
    let l = load_dataset(dir.path()).unwrap();
    assert_eq!(l.spec, spec);
    assert_eq!(l.cloud.positions, d.cloud.positions);
    let sharp = l.sharp.as_ref().unwrap();
    for (v, view) in d.views.iter().enumerate() {
        assert_eq!(l.blurs[v], view.blur);
        assert_eq!(sharp[v], view.sharp);
        assert_eq!(l.events[v].events, view.events.events);
        assert_eq!(l.events[v].polarity_sum(), view.events.polarity_sum());
        let bins = bin_events(&l.events[v], spec.u).unwrap();
        assert_eq!(bins.total(), view.events.polarity_sum());
        assert!((l.initial_bases[v].translation - view.initial.base.translation).amax() < 1e-8);
    }
    assert_eq!(l.ground_truth_latents.as_ref().unwrap().len(), spec.views * spec.u);
    let from_disk = l.training_data(spec.theta).unwrap();
    let in_memory = d.training_data(spec.theta).unwrap();
    for (a, b) in from_disk.views.iter().zip(&in_memory.views) {
        assert_eq!(a.edi_latents, b.edi_latents);
    }
}
