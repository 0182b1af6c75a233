#include <doctest.h>

#include "dt/config.hpp"

using namespace dt;

TEST_CASE("config parses sections, scalars and comments") {
  Config c = Config::parse_string(R"(
# global
name = "press-slide"
frames = 40

[contact]
k_n = 55.33
enabled = true
gravity = [0, 0, -9.8]
)");
  CHECK(c.get_string("name") == "press-slide");
  CHECK(c.get_int("frames", 0) == 40);
  CHECK(c.get_real("contact.k_n") == doctest::Approx(55.33));
  CHECK(c.get_bool("contact.enabled", false) == true);
  Vec3 g = c.get_vec3("contact.gravity", Vec3{});
  CHECK(g.z == doctest::Approx(-9.8));
  CHECK(c.get_real("contact.k_d", 239.97) == doctest::Approx(239.97));
}

TEST_CASE("untouched keys are reported for typo rejection") {
  Config c = Config::parse_string("a = 1\nb = 2\n");
  CHECK(c.get_int("a", 0) == 1);
  auto untouched = c.untouched_keys();
  REQUIRE(untouched.size() == 1);
  CHECK(untouched[0] == "b");
}

TEST_CASE("missing required key throws") {
  Config c = Config::parse_string("a = 1\n");
  CHECK_THROWS_AS(c.get_real("nope"), ConfigError);
  CHECK_THROWS_AS((void)Config::parse_string("not a key value\n"), ConfigError);
}
