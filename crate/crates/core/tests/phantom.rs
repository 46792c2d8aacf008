use samamba_core::metrics::{euler_of, property_report, PhaseIds};
use samamba_core::phantom::{generate, PhantomKind, PhantomSpec, BRINE, OIL, ROCK};
use samamba_core::volume::index;

fn clean(kind: PhantomKind, seed: u64) -> PhantomSpec {
    let mut s = PhantomSpec::new(kind, [40; 3], seed);
    s.blur_sigma = 0.0;
    s.noise_sigma = 0.0;
    s
}

#[test]
fn clean_render_maps_labels_to_gray_levels() {
    for kind in [PhantomKind::SpherePack, PhantomKind::LayeredBed, PhantomKind::DropletField, PhantomKind::WettingFilm] {
        let spec = clean(kind, 11);
        let p = generate(&spec).unwrap();
        for (v, &l) in p.image.data.iter().zip(&p.labels.labels) {
            assert_eq!(*v, spec.gray_levels[l as usize]);
        }
    }
}

#[test]
fn same_seed_same_volume() {
    let spec = PhantomSpec::new(PhantomKind::DropletField, [36, 40, 44], 5);
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    assert_eq!(a.labels.labels, b.labels.labels);
    assert!(a.image.data.iter().zip(&b.image.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    let c = generate(&PhantomSpec { seed: 6, ..spec }).unwrap();
    assert_ne!(a.labels.labels, c.labels.labels);
}

#[test]
fn porosity_hits_target() {
    for (kind, target) in [(PhantomKind::SpherePack, 0.65), (PhantomKind::LayeredBed, 0.7), (PhantomKind::SpherePack, 0.75)] {
        let mut spec = clean(kind, 21);
        spec.porosity = target;
        let p = generate(&spec).unwrap();
        assert!((p.porosity - target).abs() <= 0.01, "{kind:?}: {} vs {target}", p.porosity);
        let rep = property_report(&p.labels, spec.spacing_um, PhaseIds::default()).unwrap();
        assert!((rep.porosity_pct - 100.0 * target).abs() <= 1.0);
    }
}

#[test]
fn film_brine_touches_rock() {
    let p = generate(&clean(PhantomKind::WettingFilm, 3)).unwrap();
    let d = p.labels.dims;
    let l = &p.labels.labels;
    let mut brine = 0;
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                if l[index(d, z, y, x)] != BRINE {
                    continue;
                }
                brine += 1;
                let n = [
                    (z as isize - 1, y as isize, x as isize),
                    (z as isize + 1, y as isize, x as isize),
                    (z as isize, y as isize - 1, x as isize),
                    (z as isize, y as isize + 1, x as isize),
                    (z as isize, y as isize, x as isize - 1),
                    (z as isize, y as isize, x as isize + 1),
                ];
                let touches = n.iter().any(|&(a, b, c)| {
                    a >= 0
                        && b >= 0
                        && c >= 0
                        && (a as usize) < d[0]
                        && (b as usize) < d[1]
                        && (c as usize) < d[2]
                        && l[index(d, a as usize, b as usize, c as usize)] == ROCK
                });
                assert!(touches);
            }
        }
    }
    assert!(brine > 0);
}

#[test]
fn connected_film_has_lower_euler_than_droplets() {
    let film = generate(&clean(PhantomKind::WettingFilm, 8)).unwrap();
    let drops = generate(&clean(PhantomKind::DropletField, 8)).unwrap();
    let chi_film = euler_of(&film.labels, |l| l == BRINE);
    let chi_drops = euler_of(&drops.labels, |l| l == OIL);
    assert!(chi_drops > 1, "droplets should be many components: {chi_drops}");
    assert!(chi_film < chi_drops, "{chi_film} vs {chi_drops}");
}

#[test]
fn pore_bodies_hold_requested_oil_share() {
    let spec = clean(PhantomKind::SpherePack, 4);
    let p = generate(&spec).unwrap();
    let h = p.labels.histogram();
    let share = h[OIL as usize] as f64 / (h[BRINE as usize] + h[OIL as usize]) as f64;
    assert!((share - spec.oil_fraction).abs() < 1e-3);
}
