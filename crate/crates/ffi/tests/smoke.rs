//! Exercise the C ABI end to end: config handle, pipeline commands, the
//! encoder handle, and the error-reporting conventions.

use std::ffi::CString;
use std::os::raw::c_char;

use mama_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { mama_last_error(buf.as_mut_ptr() as *mut c_char, buf.len()) };
    let n = n.min(buf.len() - 1);
    String::from_utf8_lossy(&buf[..n]).into_owned()
}

fn set(cfg: *mut MamaConfig, section: &str, key: &str, value: &str) {
    let status =
        unsafe { mama_config_set(cfg, c(section).as_ptr(), c(key).as_ptr(), c(value).as_ptr()) };
    assert_eq!(status, MamaStatus::Ok, "{section}.{key}: {}", last_error());
}

#[test]
fn full_pipeline_through_the_c_abi() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let eval_dir = dir.path().join("eval");

    let cfg = unsafe { mama_config_new(c("desk").as_ptr()) };
    assert!(!cfg.is_null());
    // shrink everything so the smoke test stays fast
    set(cfg, "synth", "num_patients", "6");
    set(cfg, "synth", "studies_per_patient", "2");
    set(cfg, "encoder", "embed_dim", "16");
    set(cfg, "encoder", "vision_width", "16");
    set(cfg, "encoder", "text_width", "16");
    set(cfg, "encoder", "vocab_size", "128");
    set(cfg, "train", "total_steps", "4");
    set(cfg, "train", "warmup_steps", "1");
    set(cfg, "train", "delta", "2");
    set(cfg, "train", "batch_size", "2");
    set(cfg, "eval", "probe_steps", "20");
    unsafe {
        assert_eq!(mama_config_override_seed(cfg, 5), MamaStatus::Ok);
    }

    // render echoes the overrides
    let mut len = 0usize;
    unsafe {
        assert_eq!(
            mama_config_render(cfg, std::ptr::null_mut(), 0, &mut len),
            MamaStatus::Ok
        );
    }
    assert!(len > 100);
    let mut buf = vec![0u8; len + 1];
    unsafe {
        assert_eq!(
            mama_config_render(cfg, buf.as_mut_ptr() as *mut c_char, buf.len(), &mut len),
            MamaStatus::Ok
        );
    }
    let text = String::from_utf8_lossy(&buf[..len]).into_owned();
    assert!(text.contains("num_patients = 6"));

    let data_c = c(data_dir.to_str().unwrap());
    unsafe {
        assert_eq!(
            mama_synth(cfg, data_c.as_ptr()),
            MamaStatus::Ok,
            "{}",
            last_error()
        );
    }
    assert!(data_dir.join("records.csv").exists());

    let caps = dir.path().join("caps.csv");
    unsafe {
        assert_eq!(
            mama_captions(
                cfg,
                data_c.as_ptr(),
                c(caps.to_str().unwrap()).as_ptr(),
                c("clip").as_ptr(),
                -1.0,
            ),
            MamaStatus::Ok,
            "{}",
            last_error()
        );
    }
    assert!(caps.exists());

    let run_c = c(run_dir.to_str().unwrap());
    unsafe {
        assert_eq!(
            mama_pretrain(cfg, data_c.as_ptr(), run_c.as_ptr()),
            MamaStatus::Ok,
            "{}",
            last_error()
        );
    }
    let ckpt = run_dir.join("checkpoint");
    assert!(ckpt.join("manifest.txt").exists());

    let mut bacc = -1.0f64;
    unsafe {
        assert_eq!(
            mama_eval(
                cfg,
                data_c.as_ptr(),
                c(ckpt.to_str().unwrap()).as_ptr(),
                c(eval_dir.to_str().unwrap()).as_ptr(),
                c("probe").as_ptr(),
                0.5,
                &mut bacc,
            ),
            MamaStatus::Ok,
            "{}",
            last_error()
        );
    }
    assert!((0.0..=1.0).contains(&bacc));
    assert!(eval_dir.join("report_probe_0.5.json").exists());

    let maps_dir = dir.path().join("maps");
    unsafe {
        assert_eq!(
            mama_simmap(
                cfg,
                data_c.as_ptr(),
                c(ckpt.to_str().unwrap()).as_ptr(),
                c(maps_dir.to_str().unwrap()).as_ptr(),
                0,
                c("csv").as_ptr(),
                1,
            ),
            MamaStatus::Ok,
            "{}",
            last_error()
        );
    }

    // encoder handle: embed an image file and a text
    let enc = unsafe { mama_encoder_load(c(ckpt.to_str().unwrap()).as_ptr()) };
    assert!(!enc.is_null(), "{}", last_error());
    let d = unsafe { mama_encoder_embed_dim(enc) };
    assert_eq!(d, 16);
    let size = unsafe { mama_encoder_image_size(enc) };
    assert_eq!(size, 32);

    let some_image = std::fs::read_dir(data_dir.join("images"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mut img_emb = vec![0f32; d];
    unsafe {
        assert_eq!(
            mama_encode_image_file(
                enc,
                c(some_image.to_str().unwrap()).as_ptr(),
                img_emb.as_mut_ptr(),
                img_emb.len(),
            ),
            MamaStatus::Ok,
            "{}",
            last_error()
        );
    }
    let norm: f32 = img_emb.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-4, "norm {norm}");

    let mut txt_emb = vec![0f32; d];
    unsafe {
        assert_eq!(
            mama_encode_text(
                enc,
                c("The image shows spiculated mass.").as_ptr(),
                txt_emb.as_mut_ptr(),
                txt_emb.len(),
            ),
            MamaStatus::Ok,
            "{}",
            last_error()
        );
    }
    let norm: f32 = txt_emb.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-4);

    // same pixels through the raw-pixel entry point agree with the file path
    let img = mama_core::image::load_image(&some_image).unwrap();
    let pixels: Vec<f32> = img.pixels.iter().map(|&p| p as f32).collect();
    let mut emb2 = vec![0f32; d];
    unsafe {
        assert_eq!(
            mama_encode_image_pixels(
                enc,
                pixels.as_ptr(),
                img.width,
                img.height,
                emb2.as_mut_ptr(),
                emb2.len(),
            ),
            MamaStatus::Ok
        );
    }
    // pixels pass through f32, so agreement is to f32 precision
    for (a, b) in img_emb.iter().zip(&emb2) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    unsafe {
        mama_encoder_free(enc);
        mama_config_free(cfg);
    }
}

#[test]
fn error_paths_set_status_and_message() {
    // null pointers
    let status = unsafe {
        mama_config_set(
            std::ptr::null_mut(),
            c("a").as_ptr(),
            c("b").as_ptr(),
            c("c").as_ptr(),
        )
    };
    assert_eq!(status, MamaStatus::NullPointer);

    // unknown preset
    let cfg = unsafe { mama_config_new(c("galactic").as_ptr()) };
    assert!(cfg.is_null());
    assert!(last_error().contains("galactic"));

    // unknown config key
    let cfg = unsafe { mama_config_new(c("desk").as_ptr()) };
    let status = unsafe {
        mama_config_set(
            cfg,
            c("train").as_ptr(),
            c("bogus").as_ptr(),
            c("1").as_ptr(),
        )
    };
    assert_eq!(status, MamaStatus::InvalidArgument);
    assert!(last_error().contains("train.bogus"), "{}", last_error());

    // missing checkpoint directory
    let enc = unsafe { mama_encoder_load(c("/nonexistent/ckpt").as_ptr()) };
    assert!(enc.is_null());
    assert!(!last_error().is_empty());

    // undersized embedding buffer
    let dir = tempfile::tempdir().unwrap();
    let data_c = c(dir.path().join("d").to_str().unwrap());
    unsafe {
        mama_config_set(
            cfg,
            c("synth").as_ptr(),
            c("num_patients").as_ptr(),
            c("2").as_ptr(),
        );
        mama_config_set(
            cfg,
            c("synth").as_ptr(),
            c("studies_per_patient").as_ptr(),
            c("1").as_ptr(),
        );
        mama_config_set(
            cfg,
            c("encoder").as_ptr(),
            c("embed_dim").as_ptr(),
            c("16").as_ptr(),
        );
        mama_config_set(
            cfg,
            c("encoder").as_ptr(),
            c("vision_width").as_ptr(),
            c("16").as_ptr(),
        );
        mama_config_set(
            cfg,
            c("encoder").as_ptr(),
            c("text_width").as_ptr(),
            c("16").as_ptr(),
        );
        mama_config_set(
            cfg,
            c("train").as_ptr(),
            c("total_steps").as_ptr(),
            c("1").as_ptr(),
        );
        mama_config_set(
            cfg,
            c("train").as_ptr(),
            c("warmup_steps").as_ptr(),
            c("0").as_ptr(),
        );
        mama_config_set(
            cfg,
            c("train").as_ptr(),
            c("delta").as_ptr(),
            c("0").as_ptr(),
        );
        mama_config_set(
            cfg,
            c("train").as_ptr(),
            c("batch_size").as_ptr(),
            c("2").as_ptr(),
        );
        assert_eq!(mama_synth(cfg, data_c.as_ptr()), MamaStatus::Ok);
        let run_c = c(dir.path().join("r").to_str().unwrap());
        assert_eq!(
            mama_pretrain(cfg, data_c.as_ptr(), run_c.as_ptr()),
            MamaStatus::Ok,
            "{}",
            last_error()
        );
        let enc = mama_encoder_load(c(dir.path().join("r/checkpoint").to_str().unwrap()).as_ptr());
        assert!(!enc.is_null(), "{}", last_error());
        let mut tiny = vec![0f32; 3];
        let status = mama_encode_text(
            enc,
            c("hello there.").as_ptr(),
            tiny.as_mut_ptr(),
            tiny.len(),
        );
        assert_eq!(status, MamaStatus::BufferTooSmall);
        mama_encoder_free(enc);
        mama_config_free(cfg);
    }
}
