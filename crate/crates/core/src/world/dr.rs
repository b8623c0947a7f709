use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Appearance, EnvType, WorldModel};

fn random_look(rng: &mut ChaCha8Rng) -> Appearance {
    Appearance {
        color: [rng.gen(), rng.gen(), rng.gen()],
        accent: [rng.gen(), rng.gen(), rng.gen()],
        pattern: rng.gen_range(0..3),
    }
}

/// Re-colours every surface and perturbs the light level. Geometry is
/// copied untouched.
pub fn randomize_appearance(world: &WorldModel, dr_seed: u64) -> WorldModel {
    let mut rng = ChaCha8Rng::seed_from_u64(dr_seed);
    let mut out = world.clone();
    out.ground = random_look(&mut rng);
    out.ceiling = random_look(&mut rng);
    for o in &mut out.obstacles {
        o.look = random_look(&mut rng);
    }
    let cap = if world.env == EnvType::Cave { 0.4 } else { 1.0 };
    out.light = (world.light * rng.gen_range(0.7..1.15)).clamp(0.1, cap);
    out.dr_seed = Some(dr_seed);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, DEFAULT_AREA_SCALE};

    #[test]
    fn geometry_is_untouched() {
        let w = generate_world(EnvType::CollapsedCity, 3, DEFAULT_AREA_SCALE).unwrap();
        let r = randomize_appearance(&w, 99);
        assert_eq!(w.bounds, r.bounds);
        assert_eq!(w.spawn, r.spawn);
        for (a, b) in w.obstacles.iter().zip(&r.obstacles) {
            assert_eq!(a.footprint, b.footprint);
            assert_eq!(a.class, b.class);
        }
        let other = randomize_appearance(&w, 100);
        assert_ne!(r.obstacles[0].look, other.obstacles[0].look);
        assert_eq!(r, randomize_appearance(&w, 99));
    }

    #[test]
    fn cave_stays_dark() {
        for s in 0..20 {
            let w = generate_world(EnvType::Cave, s, DEFAULT_AREA_SCALE).unwrap();
            assert!(randomize_appearance(&w, s).light <= 0.4);
        }
    }
}
